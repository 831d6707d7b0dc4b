//! Dataset composition at an exact variation-set word share.
//!
//! Ratios are measured in words. Synthetic sets are drawn whole (never
//! truncated) from a seeded permutation of the pool with first-fit until the
//! target is reached; one extra set is taken if that lands closer to the
//! target. Filler utterances are drawn the same way from a seeded permutation
//! of the filler pool up to the remaining budget. Each selected set is then
//! inserted, contiguous and in member order, at a seeded position among the
//! filler.

use crate::chat::Utterance;
use crate::detect::{self, DetectionConfig, VariationSet};
use crate::digest::sha256_hex;
use crate::jsonl::{self, JsonlError};
use crate::rng::{derive_seed, stage_seed, DetRng};
use crate::stats::{dataset_stats, CorpusStats};
use crate::text;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DATASET_FORMAT: &str = "vs-dataset";
pub const DATASET_VERSION: u32 = 1;

pub const STANDARD_RATIOS: [u32; 6] = [0, 20, 40, 60, 80, 100];

/// Allowed deviation of the variation-set word share, as a fraction of the budget.
pub const RATIO_TOLERANCE: f64 = 0.005;

#[derive(Debug, thiserror::Error)]
pub enum ComposeError {
    #[error("invalid composition config: {0}")]
    Config(String),
    #[error("ratio {0}% needs synthetic sets but the synthetic pool is empty")]
    EmptySynthPool(u32),
    #[error(
        "{pool} pool exhausted: {deficit} more words needed (target {target}, reached {reached})"
    )]
    PoolExhausted {
        pool: &'static str,
        target: u64,
        reached: u64,
        deficit: u64,
    },
    #[error(
        "no selection of whole {pool} items lands within tolerance of {target} words (closest {reached}); use a larger word_budget"
    )]
    Unreachable {
        pool: &'static str,
        target: u64,
        reached: u64,
    },
    #[error("composed dataset misses the ratio tolerance: {0}")]
    Tolerance(String),
    #[error("shuffle_control needs a consecutive dataset")]
    NotConsecutive,
    #[error("natural variation sets remain in filler after {attempts} attempts: {report:?}")]
    LeakageRetriesExhausted {
        attempts: usize,
        report: LeakageReport,
    },
    #[error("dataset records: {0}")]
    Records(#[from] JsonlError),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Detect(#[from] detect::DetectError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad sidecar manifest: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: file digest {found} does not match its manifest ({expected})")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Consecutive,
    Shuffled,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Consecutive => "consecutive",
            Condition::Shuffled => "shuffled",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "consecutive" => Ok(Condition::Consecutive),
            "shuffled" => Ok(Condition::Shuffled),
            other => Err(format!(
                "unknown condition {other:?} (consecutive|shuffled)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    pub ratio_percent: u32,
    pub word_budget: u64,
    pub seed: u64,
    pub condition: Condition,
    #[serde(default)]
    pub allow_any_ratio: bool,
}

impl CompositionConfig {
    pub fn new(ratio_percent: u32, word_budget: u64, seed: u64, condition: Condition) -> Self {
        Self {
            ratio_percent,
            word_budget,
            seed,
            condition,
            allow_any_ratio: false,
        }
    }

    pub fn validate(&self) -> Result<(), ComposeError> {
        if self.ratio_percent > 100 {
            return Err(ComposeError::Config(format!(
                "ratio_percent {} exceeds 100",
                self.ratio_percent
            )));
        }
        if !self.allow_any_ratio && !STANDARD_RATIOS.contains(&self.ratio_percent) {
            return Err(ComposeError::Config(format!(
                "ratio_percent {} is not one of {STANDARD_RATIOS:?} (set allow_any_ratio to override)",
                self.ratio_percent
            )));
        }
        if self.word_budget == 0 {
            return Err(ComposeError::Config("word_budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    VsMember,
    Filler,
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sequence {
    pub text: String,
    pub kind: SequenceKind,
    pub vs_id: Option<u32>,
    pub member_index: Option<u32>,
}

impl Sequence {
    pub fn filler(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: SequenceKind::Filler,
            vs_id: None,
            member_index: None,
        }
    }

    pub fn member(text: impl Into<String>, vs_id: u32, member_index: u32) -> Self {
        Self {
            text: text.into(),
            kind: SequenceKind::VsMember,
            vs_id: Some(vs_id),
            member_index: Some(member_index),
        }
    }

    pub fn word_count(&self) -> usize {
        text::word_count(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub config: CompositionConfig,
    /// Seed of the sequence-level shuffle, for shuffled controls.
    pub shuffle_seed: Option<u64>,
    /// Digest of the dataset file bytes.
    pub manifest_hash: String,
}

impl Dataset {
    pub fn new(
        sequences: Vec<Sequence>,
        config: CompositionConfig,
        shuffle_seed: Option<u64>,
    ) -> Self {
        let manifest_hash = sha256_hex(&jsonl::to_jsonl_bytes(&sequences));
        Self {
            sequences,
            config,
            shuffle_seed,
            manifest_hash,
        }
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        jsonl::to_jsonl_bytes(&self.sequences)
    }

    /// Rebuild a dataset from its file bytes and the config stored beside it.
    pub fn from_jsonl_bytes(
        bytes: &[u8],
        config: CompositionConfig,
        shuffle_seed: Option<u64>,
    ) -> Result<Self, ComposeError> {
        let sequences: Vec<Sequence> = jsonl::read_jsonl(bytes)?;
        let d = Dataset {
            manifest_hash: sha256_hex(bytes),
            sequences,
            config,
            shuffle_seed,
        };
        d.check_invariants()?;
        Ok(d)
    }

    pub fn vs_words(&self) -> u64 {
        self.words_of(SequenceKind::VsMember)
    }

    pub fn filler_words(&self) -> u64 {
        self.words_of(SequenceKind::Filler)
    }

    pub fn total_words(&self) -> u64 {
        self.sequences.iter().map(|s| s.word_count() as u64).sum()
    }

    fn words_of(&self, kind: SequenceKind) -> u64 {
        self.sequences
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.word_count() as u64)
            .sum()
    }

    /// Number of distinct variation sets (vs_ids are dense, so max + 1).
    pub fn vs_count(&self) -> usize {
        self.sequences
            .iter()
            .filter_map(|s| s.vs_id)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    /// Dataset indices of each set's members, ordered by member_index.
    pub fn members_by_vs(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<(u32, usize)>> = vec![Vec::new(); self.vs_count()];
        for (i, s) in self.sequences.iter().enumerate() {
            if let (Some(v), Some(m)) = (s.vs_id, s.member_index) {
                out[v as usize].push((m, i));
            }
        }
        out.into_iter()
            .map(|mut v| {
                v.sort();
                v.into_iter().map(|(_, i)| i).collect()
            })
            .collect()
    }

    /// Kind/metadata agreement, dense member indices, dense vs_ids and, for
    /// the consecutive condition, contiguity of every set.
    pub fn check_invariants(&self) -> Result<(), ComposeError> {
        let bad = |m: String| Err(ComposeError::Invariant(m));
        for (i, s) in self.sequences.iter().enumerate() {
            let tagged = s.vs_id.is_some() && s.member_index.is_some();
            let untagged = s.vs_id.is_none() && s.member_index.is_none();
            match s.kind {
                SequenceKind::VsMember if !tagged => {
                    return bad(format!(
                        "sequence {i}: vs_member without vs_id/member_index"
                    ))
                }
                SequenceKind::Filler if !untagged => {
                    return bad(format!("sequence {i}: filler carries vs metadata"))
                }
                _ => {}
            }
        }
        for (v, members) in self.members_by_vs().iter().enumerate() {
            if members.is_empty() {
                return bad(format!("vs_id {v} has no members (ids not dense)"));
            }
            for (j, &idx) in members.iter().enumerate() {
                if self.sequences[idx].member_index != Some(j as u32) {
                    return bad(format!(
                        "vs_id {v}: member indices are not 0..{}",
                        members.len()
                    ));
                }
            }
            if self.config.condition == Condition::Consecutive
                && members.windows(2).any(|w| w[1] != w[0] + 1)
            {
                return bad(format!(
                    "vs_id {v} is not contiguous in a consecutive dataset"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordCounts {
    pub vs_member: u64,
    pub filler: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSeeds {
    pub composition: u64,
    pub shuffle: Option<u64>,
}

/// Sidecar written next to every dataset file as `<file>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: CompositionConfig,
    pub seeds: DatasetSeeds,
    pub prng: String,
    pub word_counts: WordCounts,
    pub sequence_count: usize,
    pub vs_count: usize,
    pub stats: CorpusStats,
    pub leakage: Option<LeakageReport>,
    pub digest: String,
}

impl Dataset {
    pub fn word_counts(&self) -> WordCounts {
        WordCounts {
            vs_member: self.vs_words(),
            filler: self.filler_words(),
            total: self.total_words(),
        }
    }

    pub fn manifest(
        &self,
        leakage: Option<LeakageReport>,
    ) -> Result<DatasetManifest, ComposeError> {
        Ok(DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config: self.config.clone(),
            seeds: DatasetSeeds {
                composition: self.config.seed,
                shuffle: self.shuffle_seed,
            },
            prng: crate::rng::PRNG_ALGORITHM.into(),
            word_counts: self.word_counts(),
            sequence_count: self.sequences.len(),
            vs_count: self.vs_count(),
            stats: dataset_stats(self)?,
            leakage,
            digest: self.manifest_hash.clone(),
        })
    }
}

pub fn sidecar_path(dataset_path: &Path) -> PathBuf {
    let mut s = dataset_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn manifest_bytes(m: &DatasetManifest) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(m).expect("manifest serializes");
    out.push(b'\n');
    out
}

/// Write the dataset lines and their sidecar manifest.
pub fn write_dataset(
    path: &Path,
    d: &Dataset,
    manifest: &DatasetManifest,
) -> Result<(), ComposeError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ComposeError::Io { path, source }
    };
    std::fs::write(path, d.to_jsonl_bytes()).map_err(io(path))?;
    let side = sidecar_path(path);
    std::fs::write(&side, manifest_bytes(manifest)).map_err(io(&side))
}

/// Read a dataset and its sidecar, checking the file against the recorded digest.
pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetManifest), ComposeError> {
    let bytes = std::fs::read(path).map_err(|source| ComposeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let side = sidecar_path(path);
    let raw = std::fs::read(&side).map_err(|source| ComposeError::Io {
        path: side.clone(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw)
        .map_err(|source| ComposeError::Sidecar { path: side, source })?;
    let found = sha256_hex(&bytes);
    if found != manifest.digest {
        return Err(ComposeError::DigestMismatch {
            path: path.to_path_buf(),
            expected: manifest.digest,
            found,
        });
    }
    let d = Dataset::from_jsonl_bytes(&bytes, manifest.config.clone(), manifest.seeds.shuffle)?;
    Ok((d, manifest))
}

fn within(value: u64, target_x100: u128, budget: u64) -> bool {
    // |value - target| <= tol * budget, with target = target_x100 / 100
    let diff = (value as f64 - target_x100 as f64 / 100.0).abs();
    diff <= RATIO_TOLERANCE * budget as f64
}

/// Closest-not-over first-fit selection, plus one more item if that is closer.
fn first_fit(
    order: &[usize],
    weight: impl Fn(usize) -> u64,
    target_x100: u128,
) -> (Vec<usize>, u64) {
    let mut taken = Vec::new();
    let mut used = vec![false; order.len()];
    let mut sum: u64 = 0;
    for (k, &i) in order.iter().enumerate() {
        let w = weight(i);
        if u128::from(sum + w) * 100 <= target_x100 {
            sum += w;
            taken.push(i);
            used[k] = true;
        }
        if u128::from(sum) * 100 == target_x100 {
            return (taken, sum);
        }
    }
    // close the remaining gap by swapping a taken item for a heavier one
    for _ in 0..order.len() {
        let gap = (target_x100 - u128::from(sum) * 100) / 100;
        if gap == 0 {
            break;
        }
        let mut first_taken: BTreeMap<u64, usize> = BTreeMap::new();
        let mut first_free: BTreeMap<u64, usize> = BTreeMap::new();
        for (k, &i) in order.iter().enumerate() {
            let slot = if used[k] {
                &mut first_taken
            } else {
                &mut first_free
            };
            slot.entry(weight(i)).or_insert(k);
        }
        let mut best: Option<(u64, usize, usize)> = None;
        for (&wa, &ka) in &first_taken {
            for (&wb, &kb) in first_free.range(wa + 1..) {
                let delta = wb - wa;
                if u128::from(delta) > gap {
                    break;
                }
                if best.is_none_or(|(d, _, _)| delta > d) {
                    best = Some((delta, ka, kb));
                }
            }
        }
        let Some((delta, ka, kb)) = best else { break };
        used[ka] = false;
        used[kb] = true;
        sum += delta;
        taken = (0..order.len())
            .filter(|&k| used[k])
            .map(|k| order[k])
            .collect();
    }
    let next = order
        .iter()
        .enumerate()
        .filter(|(k, _)| !used[*k])
        .min_by_key(|(_, &i)| weight(i));
    if let Some((_, &i)) = next {
        let w = weight(i);
        let under = target_x100 as i128 - i128::from(sum) * 100;
        let over = i128::from(sum + w) * 100 - target_x100 as i128;
        if over < under {
            sum += w;
            taken.push(i);
        }
    }
    (taken, sum)
}

/// Error for a selection outside tolerance: exhaustion when even the whole
/// pool falls short, otherwise a granularity problem.
fn miss(
    pool: &'static str,
    target_x100: u128,
    reached: u64,
    available: u64,
    budget: u64,
) -> ComposeError {
    let target = (target_x100 / 100) as u64;
    if within(available, target_x100, budget) || u128::from(available) * 100 > target_x100 {
        ComposeError::Unreachable {
            pool,
            target,
            reached,
        }
    } else {
        ComposeError::PoolExhausted {
            pool,
            target,
            reached,
            deficit: target.saturating_sub(reached),
        }
    }
}

pub fn compose_dataset(
    filler_pool: &[Utterance],
    synth_pool: &[VariationSet],
    cfg: &CompositionConfig,
) -> Result<Dataset, ComposeError> {
    cfg.validate()?;
    if cfg.ratio_percent > 0 && synth_pool.is_empty() {
        return Err(ComposeError::EmptySynthPool(cfg.ratio_percent));
    }
    let budget = cfg.word_budget;
    let vs_target_x100 = u128::from(cfg.ratio_percent) * u128::from(budget);

    let mut order: Vec<usize> = (0..synth_pool.len()).collect();
    DetRng::new(stage_seed(cfg.seed, "select-sets")).shuffle(&mut order);
    let (sets, vs_words) = if cfg.ratio_percent == 0 {
        (Vec::new(), 0)
    } else {
        first_fit(
            &order,
            |i| synth_pool[i].word_count() as u64,
            vs_target_x100,
        )
    };
    if !within(vs_words, vs_target_x100, budget) {
        let available: u64 = synth_pool.iter().map(|s| s.word_count() as u64).sum();
        return Err(miss(
            "synthetic",
            vs_target_x100,
            vs_words,
            available,
            budget,
        ));
    }

    let (fillers, filler_words) = if cfg.ratio_percent == 100 {
        (Vec::new(), 0)
    } else {
        let remainder = budget.saturating_sub(vs_words);
        let mut forder: Vec<usize> = (0..filler_pool.len()).collect();
        DetRng::new(stage_seed(cfg.seed, "select-filler")).shuffle(&mut forder);
        first_fit(
            &forder,
            |i| filler_pool[i].word_count() as u64,
            u128::from(remainder) * 100,
        )
    };
    let total = vs_words + filler_words;
    if !within(total, u128::from(budget) * 100, budget) {
        let available: u64 = filler_pool.iter().map(|u| u.word_count() as u64).sum();
        return Err(miss(
            "filler",
            u128::from(budget) * 100,
            total,
            vs_words + available,
            budget,
        ));
    }
    let share = vs_words as f64 / total as f64;
    if (share - f64::from(cfg.ratio_percent) / 100.0).abs() > RATIO_TOLERANCE {
        return Err(ComposeError::Tolerance(format!(
            "variation-set share {share:.5} vs ratio {}%",
            cfg.ratio_percent
        )));
    }

    // insertion slot for each set among the filler, 0..=F
    let mut ins_rng = DetRng::new(stage_seed(cfg.seed, "interleave"));
    let mut placed: Vec<(usize, usize)> = (0..sets.len())
        .map(|k| (ins_rng.index(fillers.len() + 1), k))
        .collect();
    placed.sort();

    let mut sequences = Vec::with_capacity(fillers.len() + sets.len() * 6);
    let mut next_vs: u32 = 0;
    let mut p = 0usize;
    for slot in 0..=fillers.len() {
        while p < placed.len() && placed[p].0 == slot {
            let set = &synth_pool[sets[placed[p].1]];
            for (j, m) in set.members.iter().enumerate() {
                sequences.push(Sequence::member(m.text.clone(), next_vs, j as u32));
            }
            next_vs += 1;
            p += 1;
        }
        if let Some(&f) = fillers.get(slot) {
            sequences.push(Sequence::filler(filler_pool[f].text.clone()));
        }
    }

    let consecutive = CompositionConfig {
        condition: Condition::Consecutive,
        ..cfg.clone()
    };
    let d = Dataset::new(sequences, consecutive, None);
    match cfg.condition {
        Condition::Consecutive => Ok(d),
        Condition::Shuffled => shuffle_control(&d, stage_seed(cfg.seed, "control")),
    }
}

/// Same sequences, order re-randomized at sequence granularity.
pub fn shuffle_control(d: &Dataset, seed: u64) -> Result<Dataset, ComposeError> {
    if d.config.condition != Condition::Consecutive {
        return Err(ComposeError::NotConsecutive);
    }
    let mut seqs = d.sequences.clone();
    DetRng::new(seed).shuffle(&mut seqs);
    let config = CompositionConfig {
        condition: Condition::Shuffled,
        ..d.config.clone()
    };
    Ok(Dataset::new(seqs, config, Some(seed)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub natural_vs_found: usize,
    /// Dataset indices of each detected set's members.
    pub offending: Vec<Vec<usize>>,
}

/// Run the detector over the filler sequences (in dataset order, set members removed).
pub fn leakage_check(d: &Dataset, cfg: &DetectionConfig) -> Result<LeakageReport, ComposeError> {
    let (index, utts): (Vec<usize>, Vec<Utterance>) = d
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == SequenceKind::Filler)
        .map(|(i, s)| {
            (
                i,
                Utterance::new(s.text.clone(), "", "dataset", i as u32 + 1),
            )
        })
        .unzip();
    let sets = detect::detect_variation_sets(&utts, cfg)?;
    Ok(LeakageReport {
        natural_vs_found: sets.len(),
        offending: sets
            .iter()
            .map(|s| s.member_indices().into_iter().map(|k| index[k]).collect())
            .collect(),
    })
}

#[derive(Debug, Clone)]
pub struct CheckedDataset {
    pub dataset: Dataset,
    pub leakage: LeakageReport,
    /// 1 + number of retries used.
    pub attempts: usize,
}

fn retry_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        derive_seed(seed, attempt as u64)
    }
}

/// Compose, re-running with derived seeds while filler still holds a
/// detectable variation set.
pub fn compose_strict(
    filler_pool: &[Utterance],
    synth_pool: &[VariationSet],
    cfg: &CompositionConfig,
    detection: &DetectionConfig,
    max_retries: usize,
) -> Result<CheckedDataset, ComposeError> {
    let mut last = None;
    for attempt in 0..=max_retries {
        let attempt_cfg = CompositionConfig {
            seed: retry_seed(cfg.seed, attempt),
            ..cfg.clone()
        };
        let dataset = compose_dataset(filler_pool, synth_pool, &attempt_cfg)?;
        let leakage = leakage_check(&dataset, detection)?;
        if leakage.natural_vs_found == 0 {
            return Ok(CheckedDataset {
                dataset,
                leakage,
                attempts: attempt + 1,
            });
        }
        last = Some(leakage);
    }
    Err(ComposeError::LeakageRetriesExhausted {
        attempts: max_retries + 1,
        report: last.expect("at least one attempt"),
    })
}

/// [`shuffle_control`] with the same retry policy as [`compose_strict`].
pub fn shuffle_control_strict(
    d: &Dataset,
    seed: u64,
    detection: &DetectionConfig,
    max_retries: usize,
) -> Result<CheckedDataset, ComposeError> {
    let mut last = None;
    for attempt in 0..=max_retries {
        let dataset = shuffle_control(d, retry_seed(seed, attempt))?;
        let leakage = leakage_check(&dataset, detection)?;
        if leakage.natural_vs_found == 0 {
            return Ok(CheckedDataset {
                dataset,
                leakage,
                attempts: attempt + 1,
            });
        }
        last = Some(leakage);
    }
    Err(ComposeError::LeakageRetriesExhausted {
        attempts: max_retries + 1,
        report: last.expect("at least one attempt"),
    })
}
