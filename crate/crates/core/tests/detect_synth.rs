mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use varset::detect::{detect_variation_sets, DetectionConfig};
use varset::synth::{self, apply_edit, EditKind, EditOp, SynthConfig};
use varset::{text, Utterance};

fn utts(lines: &[(&str, &str)]) -> Vec<Utterance> {
    lines
        .iter()
        .enumerate()
        .map(|(i, (spk, t))| Utterance::new(*t, *spk, "t.cha", i as u32 + 1))
        .collect()
}

fn words(s: &str) -> Vec<String> {
    text::words(s)
}

#[test]
fn pig_sequence_is_one_set() {
    let u = utts(&[
        ("MOT", "Put the pig there."),
        ("MOT", "Can you put the pig there?"),
        ("MOT", "The pig!"),
        ("MOT", "Look at the window."),
    ]);
    let sets = detect_variation_sets(&u, &DetectionConfig::default()).unwrap();
    assert_eq!(sets.len(), 1);
    assert_eq!(sets[0].member_indices(), vec![0, 1, 2]);
    assert_eq!(sets[0].anchors, vec!["pig", "put", "there"]);
}

#[test]
fn speaker_change_and_long_gap_split_sets() {
    let u = utts(&[
        ("MOT", "Where is the red ball?"),
        ("FAT", "The red ball is here."),
        ("MOT", "Go get the blue cup."),
        ("MOT", "Nice."),
        ("MOT", "Hmm okay."),
        ("MOT", "Get the blue cup please."),
    ]);
    let sets = detect_variation_sets(&u, &DetectionConfig::default()).unwrap();
    assert!(sets.is_empty(), "{sets:?}");
    let loose = DetectionConfig {
        same_speaker: false,
        max_gap: 2,
        ..DetectionConfig::default()
    };
    let sets = detect_variation_sets(&u, &loose).unwrap();
    let got: Vec<Vec<usize>> = sets.iter().map(|s| s.member_indices()).collect();
    assert_eq!(got, vec![vec![0, 1], vec![2, 5]]);
}

#[test]
fn bad_config_is_rejected() {
    let cfg = DetectionConfig {
        jaccard_min: 1.5,
        ..DetectionConfig::default()
    };
    assert!(detect_variation_sets(&[], &cfg).is_err());
}

/// Link rule written out again against the oracle tokenizer.
fn oracle_links(a: &str, b: &str, stop: &std::collections::HashSet<String>) -> bool {
    let ca = common::content_oracle(a, stop);
    let cb = common::content_oracle(b, stop);
    let shared = ca.intersection(&cb).count();
    let union = ca.union(&cb).count();
    shared >= 1 && (shared >= 2 || shared as f64 / union as f64 >= 0.33)
}

fn arb_stream() -> impl Strategy<Value = (Vec<Utterance>, u64)> {
    (0usize..120, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..n)
            .map(|i| {
                let spk = if i % 7 == 3 { "FAT" } else { "MOT" };
                Utterance::new(common::cds_utterance(&mut rng), spk, "s.cha", i as u32 + 1)
            })
            .collect();
        (u, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detected_sets_respect_the_rules((u, _) in arb_stream()) {
        let cfg = DetectionConfig::default();
        let stop = common::stopword_oracle();
        let sets = detect_variation_sets(&u, &cfg).unwrap();
        let mut seen = BTreeSet::new();
        for s in &sets {
            let idx = s.member_indices();
            prop_assert!(idx.len() >= cfg.min_set_size);
            for (k, w) in idx.windows(2).enumerate() {
                prop_assert!(w[1] > w[0] && w[1] - w[0] <= cfg.max_gap + 1);
                prop_assert_eq!(&u[w[0]].speaker, &u[w[1]].speaker);
                let prev = common::content_oracle(&u[w[0]].text, &stop);
                prop_assert!(!prev.is_disjoint(&common::content_oracle(&u[w[1]].text, &stop)));
                // the newcomer links to at least one earlier member
                prop_assert!(idx[..=k].iter().any(|&m| oracle_links(&u[m].text, &u[w[1]].text, &stop)));
            }
            for i in &idx {
                prop_assert!(seen.insert(*i), "utterance {} in two sets", i);
            }
        }
        prop_assert_eq!(detect_variation_sets(&u, &cfg).unwrap(), sets);
    }

    #[test]
    fn synthetic_members_replay_from_source(seed in any::<u64>(), src_seed in 0u64..1000) {
        let sources = common::cds_sources(8, src_seed);
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let stop = common::stopword_oracle();
        let pool = synth::synthesize_pool(&sources, &cfg).unwrap();
        for set in &pool.sets {
            let src = &set.members[0];
            prop_assert!(src.edit_ops.is_empty());
            prop_assert_eq!(&sources[src.index.unwrap()].text, &src.text);
            let src_words = words(&src.text);
            let src_content = common::content_oracle(&src.text, &stop);
            for m in &set.members[1..] {
                prop_assert!(!m.edit_ops.is_empty() && m.edit_ops.len() <= cfg.max_ops_per_variant);
                prop_assert_eq!(synth::replay(&src_words, &m.edit_ops).unwrap().join(" "), m.text.clone());
                prop_assert!(!src_content.is_disjoint(&common::content_oracle(&m.text, &stop)));
                let subs = m.edit_ops.iter().filter(|o| o.kind == EditKind::Substitute).count();
                prop_assert!(subs <= 1);
            }
        }
    }
}

#[test]
fn pool_is_independent_of_thread_count() {
    let sources = common::cds_sources(300, 9);
    let cfg = SynthConfig {
        seed: 77,
        ..SynthConfig::default()
    };
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(6)
        .build()
        .unwrap();
    let a = one
        .install(|| synth::synthesize_pool(&sources, &cfg))
        .unwrap();
    let b = many
        .install(|| synth::synthesize_pool(&sources, &cfg))
        .unwrap();
    assert_eq!(a.sets, b.sets);
    let c = synth::synthesize_pool(&sources, &SynthConfig { seed: 78, ..cfg }).unwrap();
    assert_ne!(a.sets, c.sets);
}

#[test]
fn synthetic_sets_are_detected_when_alone() {
    let sources = common::cds_sources(50, 21);
    let pool = synth::synthesize_pool(&sources, &SynthConfig::default()).unwrap();
    let mut hits = 0;
    for set in &pool.sets {
        let u: Vec<Utterance> = set
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| Utterance::new(m.text.clone(), "MOT", "s", i as u32))
            .collect();
        let found = detect_variation_sets(&u, &DetectionConfig::default()).unwrap();
        hits += usize::from(
            found
                .iter()
                .any(|s| s.members.len() > set.members.len() / 2),
        );
    }
    assert!(
        hits * 10 >= pool.sets.len() * 9,
        "{hits}/{}",
        pool.sets.len()
    );
}

#[test]
fn edit_examples() {
    let w = words("You want the cup, don't you?");
    let op = EditOp::new(EditKind::Reorder, 0, 5, None);
    assert_eq!(
        apply_edit(&w, &op).unwrap().join(" "),
        "Don't you, you want the cup?"
    );

    let w = words("Look at the dog.");
    let add = EditOp::new(EditKind::AddPhrase, 4, 4, Some(words("right now")));
    assert_eq!(
        apply_edit(&w, &add).unwrap().join(" "),
        "Look at the dog right now."
    );
    let del = EditOp::new(EditKind::DeletePhrase, 0, 1, None);
    assert_eq!(apply_edit(&w, &del).unwrap().join(" "), "The dog.");
    let q = EditOp::new(EditKind::QuestionTransform, 0, 0, None);
    assert_eq!(apply_edit(&w, &q).unwrap().join(" "), "Look at the dog?");
    let sub = EditOp::new(EditKind::Substitute, 3, 3, Some(words("puppy")));
    assert_eq!(
        apply_edit(&w, &sub).unwrap().join(" "),
        "Look at the puppy."
    );
    let same = EditOp::new(EditKind::Substitute, 3, 3, Some(words("Dog")));
    assert!(apply_edit(&w, &same).is_err());
    let oob = EditOp::new(EditKind::DeletePhrase, 2, 9, None);
    assert!(apply_edit(&w, &oob).is_err());
}
