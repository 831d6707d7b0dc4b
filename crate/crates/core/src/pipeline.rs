//! The full grid run (ingest, detect, synthesize, compose, schedule) driven
//! by one TOML config, plus the config loader shared by the CLI subcommands.
//!
//! Output layout under `output.dir`:
//!
//! ```text
//! manifest.json
//! corpus/utterances.jsonl     selected, filtered corpus
//! corpus/natural_sets.jsonl   variation sets found in it
//! corpus/synth_pool.jsonl     synthetic sets
//! datasets/r040_consecutive.jsonl (+ .manifest.json)
//! schedules/r040_consecutive.adjacent_batch.jsonl
//! ```
//!
//! Everything is written to `<dir>.partial` first and renamed on success.
//! If `VARSET_CACHE_DIR` is set, parsed transcripts are cached there keyed
//! by input digests, tier filter and cleaning-rules version.

use crate::chat::{self, IngestError, ParseReport, TierFilter, Utterance};
use crate::compose::{
    self, CheckedDataset, ComposeError, CompositionConfig, Condition, Dataset, WordCounts,
    STANDARD_RATIOS,
};
use crate::detect::{self, DetectError, DetectionConfig, VariationSet};
use crate::digest::sha256_hex;
use crate::jsonl;
use crate::lexicon::{default_lexicon, Lexicon};
use crate::rng::{derive_seed, stage_seed, PRNG_ALGORITHM};
use crate::schedule::{self, Method, ScheduleError, Violation};
use crate::stats::{self, CorpusStats, StatsError};
use crate::stopwords;
use crate::synth::{self, SynthConfig, SynthError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CACHE_ENV: &str = "VARSET_CACHE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("schedule {name} failed verification: {violation}")]
    Verify { name: String, violation: Violation },
    #[error("{0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    pub corpus_dir: Option<PathBuf>,
    /// When set, only these tiers are kept and `exclude_tiers` is ignored.
    pub keep_tiers: Option<Vec<String>>,
    pub exclude_tiers: Vec<String>,
    pub min_words: usize,
    pub word_budget: u64,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            keep_tiers: None,
            exclude_tiers: vec!["CHI".into()],
            min_words: 3,
            word_budget: 10_000_000,
        }
    }
}

impl IngestSection {
    pub fn tier_filter(&self) -> TierFilter {
        match &self.keep_tiers {
            Some(k) => TierFilter::keep(k.iter().cloned()),
            None => TierFilter::Exclude(self.exclude_tiers.iter().cloned().collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    pub anchor_min_shared: usize,
    pub jaccard_min: f64,
    pub max_gap: usize,
    pub min_set_size: usize,
    pub same_speaker: bool,
    /// Stopword list file; the bundled list when unset. Also used by synthesis.
    pub stopwords: Option<PathBuf>,
}

impl Default for DetectSection {
    fn default() -> Self {
        let d = DetectionConfig::default();
        Self {
            anchor_min_shared: d.anchor_min_shared,
            jaccard_min: d.jaccard_min,
            max_gap: d.max_gap,
            min_set_size: d.min_set_size,
            same_speaker: d.same_speaker,
            stopwords: None,
        }
    }
}

impl DetectSection {
    pub fn stopword_set(&self) -> Result<HashSet<String>, PipelineError> {
        match &self.stopwords {
            Some(p) => stopwords::load(p).map_err(io_err(p)),
            None => Ok(stopwords::default_stopwords()),
        }
    }

    pub fn to_config(&self) -> Result<DetectionConfig, PipelineError> {
        let cfg = DetectionConfig {
            anchor_min_shared: self.anchor_min_shared,
            jaccard_min: self.jaccard_min,
            max_gap: self.max_gap,
            min_set_size: self.min_set_size,
            same_speaker: self.same_speaker,
            stopwords: self.stopword_set()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_variants: usize,
    pub question_ratio_target: f64,
    pub max_ops_per_variant: usize,
    pub max_attempts_per_variant: usize,
    /// Lexicon file; the bundled lexicon when unset.
    pub lexicon: Option<PathBuf>,
    /// Synthetic pool size as a multiple of the largest set-word target.
    pub pool_factor: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n_variants: d.n_variants,
            question_ratio_target: d.question_ratio_target,
            max_ops_per_variant: d.max_ops_per_variant,
            max_attempts_per_variant: d.max_attempts_per_variant,
            lexicon: None,
            pool_factor: 1.1,
        }
    }
}

impl SynthSection {
    pub fn to_config(
        &self,
        seed: u64,
        stopwords: HashSet<String>,
    ) -> Result<SynthConfig, PipelineError> {
        let lexicon = match &self.lexicon {
            Some(p) => Lexicon::load(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            None => default_lexicon().clone(),
        };
        let cfg = SynthConfig {
            n_variants: self.n_variants,
            question_ratio_target: self.question_ratio_target,
            max_ops_per_variant: self.max_ops_per_variant,
            lexicon: Arc::new(lexicon),
            seed,
            stopwords: Arc::new(stopwords),
            max_attempts_per_variant: self.max_attempts_per_variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeSection {
    pub ratios: Vec<u32>,
    pub conditions: Vec<Condition>,
    pub word_budget: u64,
    pub strict_leakage: bool,
    pub leakage_retries: usize,
    pub allow_any_ratio: bool,
}

impl Default for ComposeSection {
    fn default() -> Self {
        Self {
            ratios: STANDARD_RATIOS.to_vec(),
            conditions: vec![Condition::Consecutive, Condition::Shuffled],
            word_budget: 1_000_000,
            strict_leakage: false,
            leakage_retries: 8,
            allow_any_ratio: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub methods: Vec<Method>,
    pub batch_size: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::SequentialConcat, Method::AdjacentBatch],
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ingest: IngestSection,
    pub detect: DetectSection,
    pub synth: SynthSection,
    pub compose: ComposeSection,
    pub schedule: ScheduleSection,
    pub output: OutputSection,
}

/// Set `a.b.c = value` in a TOML table. The value is read as a TOML literal
/// when it parses as one, else taken as a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        PipelineError::Config(format!("override {assignment:?} is not key=value"))
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            PipelineError::Config(format!("override {key:?}: {p} is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parse config text, apply `key=value` overrides, then check the result.
    /// Unknown keys are errors.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.ingest.corpus_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.detect.stopwords.as_mut() {
            fix(p);
        }
        if let Some(p) = self.synth.lexicon.as_mut() {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.compose.ratios.is_empty()
            || self.compose.conditions.is_empty()
            || self.schedule.methods.is_empty()
        {
            return bad(
                "compose.ratios, compose.conditions and schedule.methods must be non-empty".into(),
            );
        }
        let dupes = |n: usize, m: usize| n != m;
        if dupes(
            self.compose.ratios.iter().collect::<BTreeSet<_>>().len(),
            self.compose.ratios.len(),
        ) || dupes(
            self.compose
                .conditions
                .iter()
                .collect::<BTreeSet<_>>()
                .len(),
            self.compose.conditions.len(),
        ) || dupes(
            self.schedule.methods.iter().collect::<BTreeSet<_>>().len(),
            self.schedule.methods.len(),
        ) {
            return bad("duplicate entries in ratios, conditions or methods".into());
        }
        for &r in &self.compose.ratios {
            let mut c =
                CompositionConfig::new(r, self.compose.word_budget, 0, Condition::Consecutive);
            c.allow_any_ratio = self.compose.allow_any_ratio;
            c.validate()?;
        }
        if self.schedule.batch_size == 0 {
            return bad("schedule.batch_size must be at least 1".into());
        }
        if self.ingest.min_words == 0 {
            return bad("ingest.min_words must be at least 1".into());
        }
        if self.synth.pool_factor.is_nan() || self.synth.pool_factor < 1.0 {
            return bad(format!(
                "synth.pool_factor must be >= 1, got {}",
                self.synth.pool_factor
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub files: usize,
    pub utterances_parsed: usize,
    pub malformed_lines: usize,
    pub excluded_tier_lines: usize,
    pub empty_after_cleaning: usize,
    pub after_filter: usize,
    pub selected_utterances: usize,
    pub selected_words: u64,
    pub warning: Option<String>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub sources_tried: usize,
    pub sets: usize,
    pub shortfall_sets: usize,
    pub skipped_sources: usize,
    pub words: u64,
    /// Share of question-form members across the pool, sources included.
    pub question_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub ratio_percent: u32,
    pub condition: Condition,
    pub digest: String,
    pub word_counts: WordCounts,
    pub leakage_found: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub name: String,
    pub dataset: String,
    pub method: Method,
    pub batch_size: usize,
    pub batches: usize,
    pub slots: usize,
    pub digest: String,
}

/// One per run, written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub prng: String,
    pub cleaning_rules_version: u32,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Corpus file id to digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to digest.
    pub artifacts: BTreeMap<String, String>,
    pub ingest: IngestSummary,
    /// Whole parsed corpus, before the short-utterance filter.
    pub corpus_stats: CorpusStats,
    pub selected_stats: CorpusStats,
    pub natural_sets: usize,
    pub synth: SynthSummary,
    pub datasets: Vec<DatasetSummary>,
    pub schedules: Vec<ScheduleSummary>,
    pub timings_ms: BTreeMap<String, u64>,
}

pub fn manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("manifest.json")
}

pub fn load_run_manifest(run_dir: &Path) -> Result<RunManifest, PipelineError> {
    let p = manifest_path(run_dir);
    let raw = std::fs::read(&p).map_err(io_err(&p))?;
    serde_json::from_slice(&raw).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
}

struct Writer {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

/// Parse the corpus, reusing the cache when `VARSET_CACHE_DIR` is set.
fn ingest_cached(
    dir: &Path,
    tiers: &TierFilter,
    inputs: &BTreeMap<String, String>,
) -> Result<(Vec<Utterance>, ParseReport, bool), PipelineError> {
    let mut key = format!(
        "cleaning-rules {}\ntiers {tiers:?}\n",
        chat::CLEANING_RULES_VERSION
    );
    for (id, d) in inputs {
        key.push_str(&format!("{id}\t{d}\n"));
    }
    let key = sha256_hex(key.as_bytes());
    let key = key.trim_start_matches("sha256:");
    let cache = std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    let paths = cache.as_ref().map(|c| {
        (
            c.join(format!("ingest-{key}.jsonl")),
            c.join(format!("ingest-{key}.report.json")),
        )
    });
    if let Some((u, r)) = &paths {
        if u.is_file() && r.is_file() {
            let utts = chat::load_utterances(u)?;
            let raw = std::fs::read(r).map_err(io_err(r))?;
            let report = serde_json::from_slice(&raw)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", r.display())))?;
            return Ok((utts, report, true));
        }
    }
    let (transcripts, report) = chat::ingest_dir(dir, tiers)?;
    let utts: Vec<Utterance> = transcripts.into_iter().flat_map(|t| t.utterances).collect();
    if let (Some(c), Some((u, r))) = (&cache, &paths) {
        std::fs::create_dir_all(c).map_err(io_err(c))?;
        let tmp = u.with_extension("jsonl.tmp");
        std::fs::write(&tmp, jsonl::to_jsonl_bytes(&utts)).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, u).map_err(io_err(u))?;
        std::fs::write(r, serde_json::to_vec(&report).expect("report serializes"))
            .map_err(io_err(r))?;
    }
    Ok((utts, report, false))
}

/// Member-level question share of a set pool.
pub fn pool_question_ratio(sets: &[VariationSet]) -> f64 {
    let (mut q, mut n) = (0usize, 0usize);
    for m in sets.iter().flat_map(|s| &s.members) {
        n += 1;
        q += usize::from(crate::text::is_question(&m.text));
    }
    if n == 0 {
        0.0
    } else {
        q as f64 / n as f64
    }
}

pub struct SynthOutcome {
    pub sets: Vec<VariationSet>,
    /// Corpus indices used as set sources; excluded from filler.
    pub sources: BTreeSet<usize>,
    pub summary: SynthSummary,
}

/// Extra sets the pool holds beyond its word target, so composition can
/// land inside the tolerance even when sets are large next to it.
pub const POOL_SLACK_SETS: u64 = 16;

/// Synthesize sets from a seeded sample of `corpus` until their words reach
/// `target_words` plus [`POOL_SLACK_SETS`] sets. Sources are drawn in chunks; chunk `k` is seeded with
/// `derive_seed(seed, k)`.
pub fn build_synth_pool(
    corpus: &[Utterance],
    base: &SynthConfig,
    target_words: u64,
    seed: u64,
) -> Result<SynthOutcome, PipelineError> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    crate::rng::DetRng::new(stage_seed(seed, "sources")).shuffle(&mut order);
    let per_source = (base.n_variants + 1) as u64;
    let mut sets: Vec<VariationSet> = Vec::new();
    let mut sources = BTreeSet::new();
    let (mut words, mut taken, mut skipped, mut chunk) = (0u64, 0usize, 0usize, 0u64);
    // at small budgets a multiplicative margin is only a few sets wide
    let goal = |sets: &[VariationSet], words: u64| match (target_words, sets.len()) {
        (0, _) | (_, 0) => target_words,
        (t, n) => t + POOL_SLACK_SETS * (words / n as u64),
    };
    while words < goal(&sets, words) {
        let target_words = goal(&sets, words);
        if taken == order.len() {
            return Err(PipelineError::Pool(format!(
                "corpus too small: synthetic pool reached {words} of {target_words} words after using every utterance as a source"
            )));
        }
        // aim slightly past the remaining need so one chunk usually suffices
        let want = (target_words - words) + (target_words - words) / 20 + 1;
        let mut est = 0u64;
        let start = taken;
        while taken < order.len() && est < want {
            est += corpus[order[taken]].word_count() as u64 * per_source;
            taken += 1;
        }
        let idx = &order[start..taken];
        let chunk_sources: Vec<Utterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let cfg = SynthConfig {
            seed: derive_seed(seed, chunk),
            ..base.clone()
        };
        let pool = synth::synthesize_pool(&chunk_sources, &cfg)?;
        skipped += pool.skipped.len();
        for mut set in pool.sets {
            let local = set.members[0]
                .index
                .expect("pool sets carry their source index");
            let global = idx[local];
            set.members[0].index = Some(global);
            set.set_id = sets.len();
            words += set.word_count() as u64;
            sources.insert(global);
            sets.push(set);
        }
        chunk += 1;
    }
    let summary = SynthSummary {
        sources_tried: taken,
        sets: sets.len(),
        shortfall_sets: sets.iter().filter(|s| s.shortfall).count(),
        skipped_sources: skipped,
        words,
        question_ratio: pool_question_ratio(&sets),
    };
    Ok(SynthOutcome {
        sets,
        sources,
        summary,
    })
}

pub fn dataset_name(ratio: u32, condition: Condition) -> String {
    format!("r{ratio:03}_{}", condition.as_str())
}

struct Composed {
    name: String,
    ratio: u32,
    checked: CheckedDataset,
}

fn compose_ratio(
    filler: &[Utterance],
    pool: &[VariationSet],
    cfg: &PipelineConfig,
    det: &DetectionConfig,
    ratio: u32,
) -> Result<Vec<Composed>, PipelineError> {
    let c = &cfg.compose;
    let mut comp = CompositionConfig::new(
        ratio,
        c.word_budget,
        stage_seed(cfg.seed, &format!("compose/{ratio}")),
        Condition::Consecutive,
    );
    comp.allow_any_ratio = c.allow_any_ratio;
    let retries = c.leakage_retries;
    let consecutive = if c.strict_leakage {
        compose::compose_strict(filler, pool, &comp, det, retries)?
    } else {
        let dataset = compose::compose_dataset(filler, pool, &comp)?;
        let leakage = compose::leakage_check(&dataset, det)?;
        CheckedDataset {
            dataset,
            leakage,
            attempts: 1,
        }
    };
    let mut out = Vec::new();
    if c.conditions.contains(&Condition::Shuffled) {
        let seed = stage_seed(cfg.seed, &format!("control/{ratio}"));
        let shuffled = if c.strict_leakage {
            compose::shuffle_control_strict(&consecutive.dataset, seed, det, retries)?
        } else {
            let dataset = compose::shuffle_control(&consecutive.dataset, seed)?;
            let leakage = compose::leakage_check(&dataset, det)?;
            CheckedDataset {
                dataset,
                leakage,
                attempts: 1,
            }
        };
        out.push(Composed {
            name: dataset_name(ratio, Condition::Shuffled),
            ratio,
            checked: shuffled,
        });
    }
    if c.conditions.contains(&Condition::Consecutive) {
        out.insert(
            0,
            Composed {
                name: dataset_name(ratio, Condition::Consecutive),
                ratio,
                checked: consecutive,
            },
        );
    }
    Ok(out)
}

struct Timer {
    timings: BTreeMap<String, u64>,
    at: Instant,
}

impl Timer {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.at).as_millis() as u64);
        self.at = now;
    }
}

/// Run the grid into `root` (which must exist) and return the manifest.
fn run_into(cfg: &PipelineConfig, root: &Path) -> Result<RunManifest, PipelineError> {
    let mut timer = Timer {
        timings: BTreeMap::new(),
        at: Instant::now(),
    };
    let mut w = Writer {
        root: root.to_path_buf(),
        artifacts: BTreeMap::new(),
    };
    let det = cfg.detect.to_config()?;
    let corpus_dir = cfg
        .ingest
        .corpus_dir
        .as_deref()
        .ok_or_else(|| PipelineError::Config("ingest.corpus_dir is required".into()))?;

    let files = chat::corpus_files(corpus_dir)?;
    let inputs: BTreeMap<String, String> = files
        .par_iter()
        .map(|(id, p)| {
            Ok((
                id.clone(),
                sha256_hex(&std::fs::read(p).map_err(io_err(p))?),
            ))
        })
        .collect::<Result<_, PipelineError>>()?;
    let tiers = cfg.ingest.tier_filter();
    let (raw, report, cache_hit) = ingest_cached(corpus_dir, &tiers, &inputs)?;
    let corpus_stats = stats::corpus_stats(&raw, &det)?;
    let parsed = raw.len();
    let filtered = chat::filter_short(raw, cfg.ingest.min_words);
    let after_filter = filtered.len();
    let sel = chat::select_budget(&filtered, cfg.ingest.word_budget);
    let corpus = sel.utterances;
    let ingest = IngestSummary {
        files: files.len(),
        utterances_parsed: parsed,
        malformed_lines: report.malformed_lines.len(),
        excluded_tier_lines: report.excluded_tier_lines,
        empty_after_cleaning: report.empty_after_cleaning,
        after_filter,
        selected_utterances: corpus.len(),
        selected_words: sel.word_count,
        warning: sel.warning,
        cache_hit,
    };
    w.put("corpus/utterances.jsonl", &jsonl::to_jsonl_bytes(&corpus))?;
    timer.lap("ingest");

    let natural = detect::detect_variation_sets(&corpus, &det)?;
    let selected_stats = stats::corpus_stats(&corpus, &det)?;
    w.put(
        "corpus/natural_sets.jsonl",
        &jsonl::to_jsonl_bytes(&natural),
    )?;
    timer.lap("detect");

    let mut seeds = BTreeMap::new();
    let synth_seed = stage_seed(cfg.seed, "synth");
    seeds.insert("run".to_string(), cfg.seed);
    seeds.insert("synth".to_string(), synth_seed);
    let max_ratio = cfg.compose.ratios.iter().copied().max().unwrap_or(0);
    let target = (u128::from(max_ratio) * u128::from(cfg.compose.word_budget)) as f64 / 100.0
        * cfg.synth.pool_factor;
    let synth_cfg = cfg.synth.to_config(synth_seed, det.stopwords.clone())?;
    let synth = build_synth_pool(&corpus, &synth_cfg, target.ceil() as u64, synth_seed)?;
    w.put(
        "corpus/synth_pool.jsonl",
        &jsonl::to_jsonl_bytes(&synth.sets),
    )?;
    let filler: Vec<Utterance> = corpus
        .iter()
        .enumerate()
        .filter(|(i, _)| !synth.sources.contains(i))
        .map(|(_, u)| u.clone())
        .collect();
    timer.lap("synth");

    let composed: Vec<Vec<Composed>> = cfg
        .compose
        .ratios
        .par_iter()
        .map(|&r| compose_ratio(&filler, &synth.sets, cfg, &det, r))
        .collect::<Result<_, _>>()?;
    let composed: Vec<Composed> = composed.into_iter().flatten().collect();
    let mut datasets = Vec::new();
    for c in &composed {
        let d = &c.checked.dataset;
        seeds.insert(format!("{}/composition", c.name), d.config.seed);
        if let Some(s) = d.shuffle_seed {
            seeds.insert(format!("{}/shuffle", c.name), s);
        }
        let manifest = d.manifest(Some(c.checked.leakage.clone()))?;
        let rel = format!("datasets/{}.jsonl", c.name);
        w.put(&rel, &d.to_jsonl_bytes())?;
        w.put(
            &format!("{rel}.manifest.json"),
            &compose::manifest_bytes(&manifest),
        )?;
        datasets.push(DatasetSummary {
            name: c.name.clone(),
            ratio_percent: c.ratio,
            condition: d.config.condition,
            digest: d.manifest_hash.clone(),
            word_counts: d.word_counts(),
            leakage_found: c.checked.leakage.natural_vs_found,
            attempts: c.checked.attempts,
        });
    }
    timer.lap("compose");

    let jobs: Vec<(&Composed, Method)> = composed
        .iter()
        .flat_map(|c| cfg.schedule.methods.iter().map(move |&m| (c, m)))
        .collect();
    let built: Vec<(String, String, schedule::BatchSchedule, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(c, m)| {
            let d: &Dataset = &c.checked.dataset;
            let s = schedule::build_schedule(d, cfg.schedule.batch_size, m)?;
            let name = format!("{}.{}", c.name, m.as_str());
            schedule::verify_schedule_as(&s, d, m).map_err(|violation| PipelineError::Verify {
                name: name.clone(),
                violation,
            })?;
            let bytes = schedule::serialize_schedule(&s);
            Ok((name, c.name.clone(), s, bytes))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut schedules = Vec::new();
    for (name, dataset, s, bytes) in built {
        let rel = format!("schedules/{name}.jsonl");
        w.put(&rel, &bytes)?;
        schedules.push(ScheduleSummary {
            name,
            dataset,
            method: s.method,
            batch_size: s.batch_size,
            batches: s.batches.len(),
            slots: s.slot_count(),
            digest: sha256_hex(&bytes),
        });
    }
    timer.lap("schedule");

    Ok(RunManifest {
        tool: "varset".into(),
        tool_version: TOOL_VERSION.into(),
        prng: PRNG_ALGORITHM.into(),
        cleaning_rules_version: chat::CLEANING_RULES_VERSION,
        config: cfg.clone(),
        seeds,
        inputs,
        artifacts: w.artifacts,
        ingest,
        corpus_stats,
        selected_stats,
        natural_sets: natural.len(),
        synth: synth.summary,
        datasets,
        schedules,
        timings_ms: timer.timings,
    })
}

fn partial_dir(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Run the whole grid into `cfg.output.dir`. A previous run in that
/// directory is replaced; any other existing directory is left alone and
/// reported as an error. On failure nothing is left behind.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output.dir;
    if out.exists() && !manifest_path(out).is_file() {
        return Err(PipelineError::Config(format!(
            "{} exists and is not a previous run directory",
            out.display()
        )));
    }
    let partial = partial_dir(out);
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(io_err(&partial))?;
    }
    std::fs::create_dir_all(&partial).map_err(io_err(&partial))?;
    let result = run_into(cfg, &partial).and_then(|m| {
        let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        bytes.push(b'\n');
        let p = manifest_path(&partial);
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
        Ok(m)
    });
    match result {
        Ok(m) => {
            if out.exists() {
                std::fs::remove_dir_all(out).map_err(io_err(out))?;
            }
            std::fs::rename(&partial, out).map_err(io_err(out))?;
            Ok(m)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

/// What a stats path turned out to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    ChatCorpus,
    Utterances,
    Dataset,
}

/// Stats for a CHAT directory (whole parsed corpus, before filtering), an
/// utterance JSONL file, or a dataset file with its sidecar manifest.
pub fn stats_report(
    path: &Path,
    det: &DetectionConfig,
    tiers: &TierFilter,
) -> Result<(StatsSource, CorpusStats), PipelineError> {
    if path.is_dir() {
        let (ts, _) = chat::ingest_dir(path, tiers)?;
        let utts: Vec<Utterance> = ts.into_iter().flat_map(|t| t.utterances).collect();
        return Ok((StatsSource::ChatCorpus, stats::corpus_stats(&utts, det)?));
    }
    if !path.exists() {
        return Err(PipelineError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        });
    }
    if compose::sidecar_path(path).is_file() {
        let (d, _) = compose::load_dataset(path)?;
        return Ok((StatsSource::Dataset, stats::dataset_stats(&d)?));
    }
    let utts = chat::load_utterances(path)?;
    Ok((StatsSource::Utterances, stats::corpus_stats(&utts, det)?))
}

pub fn format_stats(s: &CorpusStats) -> String {
    format!(
        "utterances        {}\n\
         words             {}\n\
         types             {}\n\
         fragment ratio    {:.4}\n\
         question ratio    {:.4}\n\
         vs word coverage  {:.4}\n",
        s.utterance_count,
        s.total_words,
        s.type_count,
        s.fragment_ratio,
        s.question_ratio,
        s.vs_word_coverage
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg = PipelineConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.compose.ratios, vec![0, 20, 40, 60, 80, 100]);
        assert_eq!(cfg.schedule.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(PipelineConfig::from_toml_str("[compose]\nratio = [0]\n", &[]).is_err());
        assert!(PipelineConfig::from_toml_str("colour = 1\n", &[]).is_err());
        assert!(PipelineConfig::from_toml_str("", &["compose.wordbudget=5".into()]).is_err());
    }

    #[test]
    fn overrides_take_toml_literals() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 1\n[compose]\nratios = [0, 20]\n",
            &[
                "seed=9".into(),
                "compose.ratios=[40]".into(),
                "compose.conditions=[\"shuffled\"]".into(),
                "output.dir=somewhere".into(),
                "schedule.methods=[\"adjacent_batch\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.compose.ratios, vec![40]);
        assert_eq!(cfg.compose.conditions, vec![Condition::Shuffled]);
        assert_eq!(cfg.output.dir, PathBuf::from("somewhere"));
        assert_eq!(cfg.schedule.methods, vec![Method::AdjacentBatch]);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_toml_str("[compose]\nratios = [30]\n", &[]).is_err());
        assert!(PipelineConfig::from_toml_str(
            "[compose]\nratios = [30]\nallow_any_ratio = true\n",
            &[]
        )
        .is_ok());
        assert!(PipelineConfig::from_toml_str("[schedule]\nbatch_size = 0\n", &[]).is_err());
        assert!(PipelineConfig::from_toml_str("[compose]\nratios = [0, 0]\n", &[]).is_err());
    }
}
