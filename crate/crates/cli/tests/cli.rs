use std::path::Path;
use std::process::{Command, Output};

fn varset(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varset"))
        .args(args)
        .env_remove("VARSET_CACHE_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = varset(args);
    assert!(
        o.status.success(),
        "varset {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_corpus(dir: &Path, lines: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let nouns = ["cup", "ball", "dog", "spoon", "book", "hat", "shoe", "duck"];
    for f in 0..2 {
        let mut s = String::from("@UTF8\n@Begin\n@Participants:\tCHI Target_Child, MOT Mother\n");
        for i in 0..lines {
            let n = nouns[(i * 3 + f) % nouns.len()];
            s.push_str(&format!(
                "*MOT:\tcan you bring the {n} number{f}x{i} to me ?\n"
            ));
            if i % 5 == 0 {
                s.push_str("*CHI:\tno .\n");
            }
        }
        s.push_str("@End\n");
        std::fs::write(dir.join(format!("f{f}.cha")), s).unwrap();
    }
}

#[test]
fn stage_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    write_corpus(&t.join("corpus"), 150);

    let utts = t.join("utts.jsonl");
    ok(&[
        "ingest",
        "--corpus",
        p(&t.join("corpus")),
        "--out",
        p(&utts),
    ]);
    let n_lines = std::fs::read_to_string(&utts).unwrap().lines().count();
    assert_eq!(n_lines, 300);

    ok(&[
        "detect",
        "--input",
        p(&utts),
        "--out",
        p(&t.join("natural.jsonl")),
    ]);
    let pool = t.join("pool.jsonl");
    ok(&[
        "synth",
        "--input",
        p(&utts),
        "--out",
        p(&pool),
        "--seed",
        "4",
    ]);
    let pool_again = t.join("pool2.jsonl");
    ok(&[
        "--jobs",
        "1",
        "synth",
        "--input",
        p(&utts),
        "--out",
        p(&pool_again),
        "--seed",
        "4",
    ]);
    assert_eq!(
        std::fs::read(&pool).unwrap(),
        std::fs::read(&pool_again).unwrap()
    );

    let data = t.join("r040.jsonl");
    ok(&[
        "compose",
        "--filler",
        p(&utts),
        "--pool",
        p(&pool),
        "--ratio",
        "40",
        "--budget",
        "1500",
        "--seed",
        "9",
        "--out",
        p(&data),
    ]);
    assert!(t.join("r040.jsonl.manifest.json").is_file());

    for method in ["sequential_concat", "adjacent_batch"] {
        let sched = t.join(format!("s.{method}.jsonl"));
        ok(&[
            "schedule",
            "--dataset",
            p(&data),
            "--method",
            method,
            "--batch-size",
            "4",
            "--out",
            p(&sched),
        ]);
        let o = ok(&[
            "verify",
            "--schedule",
            p(&sched),
            "--dataset",
            p(&data),
            "--method",
            method,
        ]);
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS"));
    }

    // move the first continuation member to the front batch
    let sched = t.join("s.adjacent_batch.jsonl");
    let text = std::fs::read_to_string(&sched).unwrap();
    let mut lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (bi, si) = lines
        .iter()
        .enumerate()
        .skip(2)
        .find_map(|(bi, b)| {
            b["slots"]
                .as_array()
                .unwrap()
                .iter()
                .position(|s| s["member_index"] == 1)
                .map(|si| (bi, si))
        })
        .expect("a continuation member after the first batch");
    let slot = lines[bi]["slots"].as_array_mut().unwrap().remove(si);
    lines[1]["slots"].as_array_mut().unwrap().push(slot);
    let tampered: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&sched, tampered).unwrap();
    let o = varset(&["verify", "--schedule", p(&sched), "--dataset", p(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("FAIL"));

    let o = ok(&["stats", p(&data)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("utterances"));
    let stats_json = t.join("stats.json");
    ok(&["stats", p(&t.join("corpus")), "--out", p(&stats_json)]);
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&stats_json).unwrap()).unwrap();
    assert!(v.to_string().contains("fragment_ratio"));
}

#[test]
fn compose_rejects_nonstandard_ratio_without_override() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    write_corpus(&t.join("corpus"), 60);
    let utts = t.join("u.jsonl");
    ok(&[
        "ingest",
        "--corpus",
        p(&t.join("corpus")),
        "--out",
        p(&utts),
    ]);
    let o = varset(&[
        "compose",
        "--filler",
        p(&utts),
        "--pool",
        p(&utts),
        "--ratio",
        "30",
        "--budget",
        "500",
        "--out",
        p(&t.join("d.jsonl")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert!(!t.join("d.jsonl").exists());
}

#[test]
fn run_from_config_with_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    write_corpus(&t.join("corpus"), 600);
    let cfg = t.join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 11\n[ingest]\ncorpus_dir = \"corpus\"\n[compose]\nratios = [0, 20]\nword_budget = 5000\n[schedule]\nbatch_size = 8\n",
    )
    .unwrap();
    let cache = t.join("cache");
    let run = |out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_varset"))
            .args(["--config", p(&cfg), "run", "--out", out])
            .env("VARSET_CACHE_DIR", &cache)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<serde_json::Value>(
            &std::fs::read(Path::new(out).join("manifest.json")).unwrap(),
        )
        .unwrap()
    };
    let a = run(p(&t.join("a")));
    let b = run(p(&t.join("b")));
    assert_eq!(a["ingest"]["cache_hit"], false);
    assert_eq!(b["ingest"]["cache_hit"], true);
    assert_eq!(a["artifacts"], b["artifacts"]);
    assert_eq!(a["schedules"].as_array().unwrap().len(), 8);
    assert!(t
        .join("a/schedules/r020_consecutive.adjacent_batch.jsonl")
        .is_file());

    let o = varset(&[
        "--config",
        p(&cfg),
        "--set",
        "compose.ratios=[0, 0]",
        "run",
        "--out",
        p(&t.join("c")),
    ]);
    assert!(!o.status.success());
    assert!(!t.join("c").exists());
}

#[test]
fn missing_corpus_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = varset(&[
        "ingest",
        "--corpus",
        p(&tmp.path().join("nope")),
        "--out",
        p(&tmp.path().join("u.jsonl")),
    ]);
    assert!(!o.status.success());
    assert!(!tmp.path().join("u.jsonl").exists());
}

#[test]
fn detect_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let corpus = t.join("c");
    std::fs::create_dir(&corpus).unwrap();
    std::fs::write(
        corpus.join("s.cha"),
        "@Begin\n*MOT:\tyou wanna straw ?\n*MOT:\there's your straw .\n*MOT:\tuh oh .\n*MOT:\twhere's the straw ?\n@End\n",
    )
    .unwrap();
    let utts = t.join("u.jsonl");
    ok(&[
        "ingest",
        "--corpus",
        p(&corpus),
        "--out",
        p(&utts),
        "--min-words",
        "1",
    ]);
    let count = |args: &[&str]| {
        let out = t.join("sets.jsonl");
        let mut a = vec!["detect", "--input", p(&utts), "--out", p(&out)];
        a.extend_from_slice(args);
        ok(&a);
        std::fs::read_to_string(&out).unwrap().lines().count()
    };
    assert_eq!(count(&[]), 1);
    assert_eq!(count(&["--max-gap", "0"]), 1);
    assert_eq!(count(&["--min-set-size", "4"]), 0);
    let stop = t.join("stop.txt");
    std::fs::write(&stop, "straw\n").unwrap();
    assert_eq!(count(&["--stopwords", p(&stop)]), 0);
    let o = varset(&[
        "detect",
        "--input",
        p(&utts),
        "--out",
        p(&t.join("x.jsonl")),
        "--jaccard-min",
        "2",
    ]);
    assert!(!o.status.success());
}
