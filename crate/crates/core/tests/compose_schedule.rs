mod common;

use proptest::prelude::*;
use std::collections::HashMap;
use std::sync::OnceLock;
use varset::compose::{
    self, ComposeError, CompositionConfig, Condition, SequenceKind, STANDARD_RATIOS,
};
use varset::schedule::{self, Method, ScheduleError, Violation};
use varset::synth::{self, SynthConfig};
use varset::{Utterance, VariationSet};

struct Pools {
    filler: Vec<Utterance>,
    sets: Vec<VariationSet>,
}

fn pools() -> &'static Pools {
    static P: OnceLock<Pools> = OnceLock::new();
    P.get_or_init(|| Pools {
        filler: common::unrelated_filler(1_200, 2),
        sets: synth::synthesize_pool(&common::cds_sources(300, 4), &SynthConfig::default())
            .unwrap()
            .sets,
    })
}

fn counts<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composition_draws_whole_sets_and_unique_filler(
        r in prop::sample::select(STANDARD_RATIOS.to_vec()),
        budget in 2_000u64..6_000,
        seed in any::<u64>(),
    ) {
        let p = pools();
        let cfg = CompositionConfig::new(r, budget, seed, Condition::Consecutive);
        let d = compose::compose_dataset(&p.filler, &p.sets, &cfg).unwrap();
        d.check_invariants().unwrap();

        // filler lines come from the pool, each at most once
        let pool_filler = counts(p.filler.iter().map(|u| u.text.as_str()));
        let used = counts(d.sequences.iter().filter(|s| s.kind == SequenceKind::Filler).map(|s| s.text.as_str()));
        for (t, n) in &used {
            prop_assert!(pool_filler.get(t).copied().unwrap_or(0) >= *n);
        }
        // every inserted set is a whole pool set, and none repeats
        let pool_sets = counts(p.sets.iter().map(|s| s.members.iter().map(|m| m.text.clone()).collect::<Vec<_>>()));
        let mut seen = HashMap::new();
        for ids in d.members_by_vs() {
            let texts: Vec<String> = ids.iter().map(|&i| d.sequences[i].text.clone()).collect();
            prop_assert!(pool_sets.contains_key(&texts));
            *seen.entry(texts).or_insert(0) += 1;
        }
        prop_assert!(seen.values().all(|&n| n == 1));

        let vs = d.vs_words() as f64;
        let total = d.total_words() as f64;
        let target = f64::from(r) / 100.0;
        prop_assert!((vs / total - target).abs() <= 0.005, "share {}", vs / total);
        prop_assert!((vs - target * budget as f64).abs() <= 0.005 * budget as f64);
        prop_assert!((total - budget as f64).abs() <= 0.005 * budget as f64);

        let again = compose::compose_dataset(&p.filler, &p.sets, &cfg).unwrap();
        prop_assert_eq!(again.to_jsonl_bytes(), d.to_jsonl_bytes());
    }

    #[test]
    fn shuffled_condition_keeps_the_multiset(seed in any::<u64>()) {
        let p = pools();
        let cfg = CompositionConfig::new(60, 3_000, seed, Condition::Consecutive);
        let a = compose::compose_dataset(&p.filler, &p.sets, &cfg).unwrap();
        let b = compose::compose_dataset(&p.filler, &p.sets, &CompositionConfig { condition: Condition::Shuffled, ..cfg }).unwrap();
        prop_assert_eq!(counts(a.sequences.iter().cloned()), counts(b.sequences.iter().cloned()));
        prop_assert_eq!(b.shuffle_seed.is_some(), true);
        b.check_invariants().unwrap();
    }

    #[test]
    fn adjacent_batches_satisfy_the_checkers(
        layout in prop::collection::vec(prop_oneof![3 => Just(0usize), 1 => 2usize..=8], 1..80),
        b in 1usize..=16,
    ) {
        let d = common::layout_dataset(&layout);
        let s = schedule::schedule_adjacent_batch(&d, b).unwrap();
        prop_assert!(schedule::verify_schedule(&s, &d).is_ok());
        prop_assert_eq!(common::brute_force_check(&d, &s), Vec::<String>::new());
        let bytes = schedule::serialize_schedule(&s);
        prop_assert_eq!(schedule::deserialize_schedule(&bytes).unwrap(), s);
    }
}

#[test]
fn pool_shortage_is_reported() {
    let p = pools();
    let cfg = CompositionConfig::new(100, 50_000, 1, Condition::Consecutive);
    match compose::compose_dataset(&p.filler, &p.sets, &cfg) {
        Err(ComposeError::PoolExhausted { deficit, .. }) => assert!(deficit > 0),
        other => panic!("expected PoolExhausted, got {other:?}"),
    }
}

/// All orderings of three 2-member sets among `f` filler lines.
fn layouts(f: usize) -> Vec<Vec<usize>> {
    let n = f + 3;
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() == 3 {
            out.push(
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { 2 } else { 0 })
                    .collect(),
            );
        }
    }
    out
}

/// Fewest batches any assignment can use: every item gets a start batch,
/// sets take two consecutive batches, no batch exceeds `b`.
fn min_batches(layout: &[usize], b: usize) -> usize {
    let n: usize = layout.iter().map(|&l| l.max(1)).sum();
    let longest = layout.iter().copied().max().unwrap_or(0).max(1);
    let mut t = n.div_ceil(b).max(longest);
    loop {
        let mut load = vec![0usize; t];
        if place(layout, 0, b, &mut load) {
            return t;
        }
        t += 1;
    }
}

fn place(layout: &[usize], k: usize, b: usize, load: &mut [usize]) -> bool {
    if k == layout.len() {
        return load.iter().all(|&x| x > 0);
    }
    let len = layout[k].max(1);
    for start in 0..=load.len() - len {
        if (start..start + len).all(|i| load[i] < b) {
            (start..start + len).for_each(|i| load[i] += 1);
            if place(layout, k + 1, b, load) {
                return true;
            }
            (start..start + len).for_each(|i| load[i] -= 1);
        }
    }
    false
}

#[test]
fn three_pairs_exhaustive() {
    for f in 0..=4 {
        for layout in layouts(f) {
            let d = common::layout_dataset(&layout);
            let s = schedule::schedule_adjacent_batch(&d, 3).unwrap();
            schedule::verify_schedule(&s, &d).unwrap();
            assert!(common::brute_force_check(&d, &s).is_empty(), "{layout:?}");
            assert_eq!(s.batches.len(), min_batches(&layout, 3), "{layout:?}");
        }
    }
}

#[test]
fn sequential_concat_spans_recover_members() {
    let d = common::layout_dataset(&[0, 3, 0, 2, 4, 0]);
    let s = schedule::schedule_sequential_concat(&d, 2).unwrap();
    schedule::verify_schedule_as(&s, &d, Method::SequentialConcat).unwrap();
    assert_eq!(s.slot_count(), 6);
    let by_vs = d.members_by_vs();
    for slot in s.batches.iter().flat_map(|b| &b.slots) {
        if let Some(spans) = &slot.members {
            let ids: Vec<usize> = spans.iter().map(|m| m.sequence_id).collect();
            assert_eq!(ids, by_vs[slot.vs_id.unwrap() as usize]);
            let (line, _) = schedule::concat_spans(&d, &ids);
            for m in spans {
                assert_eq!(
                    &line[m.byte_start..m.byte_end],
                    d.sequences[m.sequence_id].text
                );
            }
        }
    }
    assert!(matches!(
        schedule::verify_schedule_as(&s, &d, Method::AdjacentBatch),
        Err(Violation::MethodMismatch { .. })
    ));
}

#[test]
fn zero_batch_size_is_rejected() {
    let d = common::layout_dataset(&[0, 2]);
    for m in [Method::SequentialConcat, Method::AdjacentBatch] {
        assert!(matches!(
            schedule::build_schedule(&d, 0, m),
            Err(ScheduleError::BatchSize)
        ));
    }
}

#[test]
fn shuffled_dataset_gets_plain_batches() {
    let p = pools();
    let cfg = CompositionConfig::new(40, 2_000, 3, Condition::Shuffled);
    let d = compose::compose_dataset(&p.filler, &p.sets, &cfg).unwrap();
    for m in [Method::SequentialConcat, Method::AdjacentBatch] {
        let s = schedule::build_schedule(&d, 5, m).unwrap();
        schedule::verify_schedule(&s, &d).unwrap();
        let order: Vec<usize> = s
            .batches
            .iter()
            .flat_map(|b| b.slots.iter().map(|x| x.sequence_id))
            .collect();
        assert_eq!(order, (0..d.sequences.len()).collect::<Vec<_>>());
    }
}

#[test]
fn schedule_files_detect_truncation_and_foreign_datasets() {
    let d = common::layout_dataset(&[0, 2, 0, 0, 3, 0, 0]);
    let other = common::layout_dataset(&[0, 0, 2]);
    let s = schedule::schedule_adjacent_batch(&d, 2).unwrap();
    let bytes = schedule::serialize_schedule(&s);
    let cut = bytes[..bytes.len() - 1]
        .iter()
        .rposition(|&c| c == b'\n')
        .unwrap()
        + 1;
    assert!(matches!(
        schedule::deserialize_schedule(&bytes[..cut]),
        Err(ScheduleError::Truncated { .. })
    ));
    assert!(schedule::deserialize_schedule(&bytes[..bytes.len() - 3]).is_err());
    schedule::load_schedule_checked(&bytes, &d.to_jsonl_bytes()).unwrap();
    assert!(matches!(
        schedule::load_schedule_checked(&bytes, &other.to_jsonl_bytes()),
        Err(ScheduleError::DigestMismatch { .. })
    ));
    assert!(schedule::verify_schedule(&s, &other).is_err());
}

#[test]
fn dataset_files_roundtrip_through_sidecar() {
    let p = pools();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = CompositionConfig::new(20, 2_500, 8, Condition::Consecutive);
    let d = compose::compose_dataset(&p.filler, &p.sets, &cfg).unwrap();
    let path = tmp.path().join("r020_consecutive.jsonl");
    let leak = compose::leakage_check(&d, &Default::default()).unwrap();
    compose::write_dataset(&path, &d, &d.manifest(Some(leak)).unwrap()).unwrap();
    let (back, m) = compose::load_dataset(&path).unwrap();
    assert_eq!(back.sequences, d.sequences);
    assert_eq!(back.manifest_hash, d.manifest_hash);
    assert_eq!(m.word_counts, d.word_counts());
    assert!(compose::sidecar_path(&path).exists());
}

#[test]
fn coarse_sets_report_unreachable_targets() {
    // 30-word sets cannot land within 5 words of 200
    let member = varset::SetMember {
        index: None,
        text: "one two three four five six seven eight nine ten.".into(),
        edit_ops: Vec::new(),
    };
    let set = VariationSet {
        set_id: 0,
        origin: varset::Origin::Synthetic,
        members: vec![member; 3],
        anchors: vec!["one".into()],
        shortfall: false,
    };
    let pool = vec![set; 20];
    let cfg = CompositionConfig::new(20, 1_000, 0, Condition::Consecutive);
    match compose::compose_dataset(&pools().filler, &pool, &cfg) {
        Err(ComposeError::Unreachable {
            target, reached, ..
        }) => {
            assert_eq!(target, 200);
            assert_eq!(reached % 30, 0);
        }
        other => panic!("expected Unreachable, got {other:?}"),
    }
}
