//! `varset` command-line tool.
//!
//! Every subcommand reads the same TOML config (`--config`, optional) and
//! its flags are shorthands for config keys; `--set key=value` reaches any
//! key directly.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use varset::chat;
use varset::compose::{self, CompositionConfig, Condition};
use varset::detect;
use varset::jsonl;
use varset::pipeline::{self, PipelineConfig};
use varset::rng::stage_seed;
use varset::schedule::{self, Method};
use varset::synth;
use varset::VariationSet;

#[derive(Parser)]
#[command(
    name = "varset",
    version,
    about = "Variation-set corpus builder and batch scheduler"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set compose.word_budget=50000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a CHAT corpus, drop short utterances and cut to the word budget.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_words: Option<usize>,
        #[arg(long)]
        budget: Option<u64>,
        /// Keep only these tiers (comma separated).
        #[arg(long, value_delimiter = ',')]
        keep_tiers: Option<Vec<String>>,
    },
    /// Find variation sets in an utterance file.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shared content words that link two utterances on their own.
        #[arg(long)]
        anchor_min: Option<usize>,
        #[arg(long)]
        jaccard_min: Option<f64>,
        #[arg(long)]
        max_gap: Option<usize>,
        #[arg(long)]
        min_set_size: Option<usize>,
        /// Stopword list, one word per line.
        #[arg(long)]
        stopwords: Option<PathBuf>,
    },
    /// Synthesize one variation set per input utterance.
    Synth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_variants: Option<usize>,
    },
    /// Mix synthetic sets into filler at a word ratio.
    Compose {
        #[arg(long)]
        filler: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        ratio: u32,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "consecutive")]
        condition: Condition,
        #[arg(long)]
        strict_leakage: bool,
        #[arg(long)]
        allow_any_ratio: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and verify a batch schedule for a dataset.
    Schedule {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a schedule against its dataset. Exit status 1 on any violation.
    Verify {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also require this method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Corpus statistics for a CHAT directory, utterance file or dataset.
    Stats {
        path: PathBuf,
        /// Write the stats record as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full grid from the config.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn quoted_path(p: &Path) -> Result<String> {
    let abs = std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?;
    Ok(serde_json::to_string(&abs.to_string_lossy()).expect("string serializes"))
}

fn load_config(g: &Global, mut extra: Vec<String>) -> Result<PipelineConfig> {
    let mut overrides = g.set.clone();
    overrides.append(&mut extra);
    Ok(match &g.config {
        Some(p) => PipelineConfig::load(p, &overrides)?,
        None => PipelineConfig::from_toml_str("", &overrides)?,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_sets(path: &Path) -> Result<Vec<VariationSet>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    jsonl::read_jsonl(std::io::BufReader::new(f))
        .with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Ingest {
            corpus,
            out,
            min_words,
            budget,
            keep_tiers,
        } => {
            let mut o = Vec::new();
            if let Some(c) = corpus {
                o.push(format!("ingest.corpus_dir={}", quoted_path(&c)?));
            }
            if let Some(m) = min_words {
                o.push(format!("ingest.min_words={m}"));
            }
            if let Some(b) = budget {
                o.push(format!("ingest.word_budget={b}"));
            }
            if let Some(k) = keep_tiers {
                o.push(format!("ingest.keep_tiers={}", serde_json::to_string(&k)?));
            }
            let cfg = load_config(g, o)?;
            let dir = cfg
                .ingest
                .corpus_dir
                .clone()
                .context("no corpus directory (use --corpus or ingest.corpus_dir)")?;
            let (transcripts, report) = chat::ingest_dir(&dir, &cfg.ingest.tier_filter())?;
            let all: Vec<_> = transcripts.into_iter().flat_map(|t| t.utterances).collect();
            let parsed = all.len();
            let kept = chat::filter_short(all, cfg.ingest.min_words);
            let sel = chat::select_budget(&kept, cfg.ingest.word_budget);
            if let Some(w) = &sel.warning {
                eprintln!("warning: {w}");
            }
            write_file(&out, &jsonl::to_jsonl_bytes(&sel.utterances))?;
            eprintln!(
                "parsed {parsed} utterances ({} malformed lines skipped), kept {}, selected {} ({} words)",
                report.malformed_lines.len(),
                kept.len(),
                sel.utterances.len(),
                sel.word_count
            );
        }
        Command::Detect {
            input,
            out,
            anchor_min,
            jaccard_min,
            max_gap,
            min_set_size,
            stopwords,
        } => {
            let mut o = Vec::new();
            if let Some(n) = anchor_min {
                o.push(format!("detect.anchor_min_shared={n}"));
            }
            if let Some(j) = jaccard_min {
                o.push(format!("detect.jaccard_min={j:?}"));
            }
            if let Some(n) = max_gap {
                o.push(format!("detect.max_gap={n}"));
            }
            if let Some(n) = min_set_size {
                o.push(format!("detect.min_set_size={n}"));
            }
            if let Some(p) = stopwords {
                o.push(format!("detect.stopwords={}", quoted_path(&p)?));
            }
            let cfg = load_config(g, o)?;
            let det = cfg.detect.to_config()?;
            let utts = chat::load_utterances(&input)?;
            let sets = detect::detect_variation_sets(&utts, &det)?;
            write_file(&out, &jsonl::to_jsonl_bytes(&sets))?;
            let coverage = detect::vs_coverage(&utts, &det).unwrap_or(0.0);
            eprintln!("{} variation sets, word coverage {coverage:.4}", sets.len());
        }
        Command::Synth {
            input,
            out,
            seed,
            n_variants,
        } => {
            let mut o = Vec::new();
            if let Some(s) = seed {
                o.push(format!("seed={s}"));
            }
            if let Some(n) = n_variants {
                o.push(format!("synth.n_variants={n}"));
            }
            let cfg = load_config(g, o)?;
            let scfg = cfg.synth.to_config(cfg.seed, cfg.detect.stopword_set()?)?;
            let utts = chat::load_utterances(&input)?;
            let pool = synth::synthesize_pool(&utts, &scfg)?;
            write_file(&out, &jsonl::to_jsonl_bytes(&pool.sets))?;
            eprintln!(
                "{} sets from {} sources ({} skipped), member question ratio {:.4}",
                pool.sets.len(),
                utts.len(),
                pool.skipped.len(),
                pipeline::pool_question_ratio(&pool.sets)
            );
        }
        Command::Compose {
            filler,
            pool,
            ratio,
            budget,
            seed,
            condition,
            strict_leakage,
            allow_any_ratio,
            out,
        } => {
            let mut o = Vec::new();
            if let Some(b) = budget {
                o.push(format!("compose.word_budget={b}"));
            }
            if let Some(s) = seed {
                o.push(format!("seed={s}"));
            }
            if strict_leakage {
                o.push("compose.strict_leakage=true".into());
            }
            if allow_any_ratio {
                o.push("compose.allow_any_ratio=true".into());
            }
            let cfg = load_config(g, o)?;
            let det = cfg.detect.to_config()?;
            let filler = chat::load_utterances(&filler)?;
            let pool = read_sets(&pool)?;
            let mut comp = CompositionConfig::new(
                ratio,
                cfg.compose.word_budget,
                cfg.seed,
                Condition::Consecutive,
            );
            comp.allow_any_ratio = cfg.compose.allow_any_ratio;
            let retries = cfg.compose.leakage_retries;
            let strict = cfg.compose.strict_leakage;
            let mut checked = if strict {
                compose::compose_strict(&filler, &pool, &comp, &det, retries)?
            } else {
                let dataset = compose::compose_dataset(&filler, &pool, &comp)?;
                let leakage = compose::leakage_check(&dataset, &det)?;
                compose::CheckedDataset {
                    dataset,
                    leakage,
                    attempts: 1,
                }
            };
            if condition == Condition::Shuffled {
                let s = stage_seed(cfg.seed, "control");
                checked = if strict {
                    compose::shuffle_control_strict(&checked.dataset, s, &det, retries)?
                } else {
                    let dataset = compose::shuffle_control(&checked.dataset, s)?;
                    let leakage = compose::leakage_check(&dataset, &det)?;
                    compose::CheckedDataset {
                        dataset,
                        leakage,
                        attempts: 1,
                    }
                };
            }
            let d = &checked.dataset;
            let m = d.manifest(Some(checked.leakage.clone()))?;
            compose::write_dataset(&out, d, &m)?;
            eprintln!(
                "{} sequences, {} sets; words: {} vs_member / {} filler / {} total; leakage {}",
                m.sequence_count,
                m.vs_count,
                m.word_counts.vs_member,
                m.word_counts.filler,
                m.word_counts.total,
                checked.leakage.natural_vs_found
            );
        }
        Command::Schedule {
            dataset,
            method,
            batch_size,
            out,
        } => {
            let mut o = Vec::new();
            if let Some(b) = batch_size {
                o.push(format!("schedule.batch_size={b}"));
            }
            let cfg = load_config(g, o)?;
            let (d, _) = compose::load_dataset(&dataset)?;
            let s = schedule::build_schedule(&d, cfg.schedule.batch_size, method)?;
            schedule::verify_schedule_as(&s, &d, method).context("schedule failed verification")?;
            write_file(&out, &schedule::serialize_schedule(&s))?;
            eprintln!("{} batches, {} slots", s.batches.len(), s.slot_count());
        }
        Command::Verify {
            schedule: spath,
            dataset,
            method,
        } => {
            let sbytes =
                std::fs::read(&spath).with_context(|| format!("reading {}", spath.display()))?;
            let dbytes = std::fs::read(&dataset)
                .with_context(|| format!("reading {}", dataset.display()))?;
            let s = schedule::load_schedule_checked(&sbytes, &dbytes)?;
            let (d, _) = compose::load_dataset(&dataset)?;
            let verdict = match method {
                Some(m) => schedule::verify_schedule_as(&s, &d, m),
                None => schedule::verify_schedule(&s, &d),
            };
            match verdict {
                Ok(()) => println!("PASS {} ({} batches)", s.method, s.batches.len()),
                Err(v) => {
                    println!("FAIL {v}");
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Stats { path, out } => {
            let cfg = load_config(g, Vec::new())?;
            let det = cfg.detect.to_config()?;
            let (source, stats) = pipeline::stats_report(&path, &det, &cfg.ingest.tier_filter())?;
            print!("{}", pipeline::format_stats(&stats));
            if let Some(out) = out {
                let record = serde_json::json!({
                    "path": path.to_string_lossy(),
                    "source": source,
                    "stats": stats,
                });
                let mut bytes = serde_json::to_vec_pretty(&record)?;
                bytes.push(b'\n');
                write_file(&out, &bytes)?;
            }
        }
        Command::Run { out } => {
            let mut o = Vec::new();
            if let Some(d) = out {
                o.push(format!("output.dir={}", quoted_path(&d)?));
            }
            let cfg = load_config(g, o)?;
            let m = pipeline::run_pipeline(&cfg)?;
            for d in &m.datasets {
                eprintln!(
                    "{:<22} {:>9} words  vs {:>9}  leakage {}  attempts {}",
                    d.name,
                    d.word_counts.total,
                    d.word_counts.vs_member,
                    d.leakage_found,
                    d.attempts
                );
            }
            eprintln!(
                "{} datasets, {} schedules written to {}",
                m.datasets.len(),
                m.schedules.len(),
                cfg.output.dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
