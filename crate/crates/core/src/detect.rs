//! Natural variation-set detection by lexical anchor overlap.
//!
//! Two utterances *link* when they share at least `anchor_min_shared` content
//! words, or when the Jaccard index of their content-word sets reaches
//! `jaccard_min` (with at least one shared word). Detection is a single greedy
//! left-to-right pass: an utterance joins the earliest open set it links to,
//! provided it also shares a content word with that set's latest member. A
//! set stays open while at most `max_gap` non-member utterances have passed
//! since its latest member. Utterances that join nothing open a new candidate
//! set; candidates smaller than `min_set_size` are dropped at the end.

use crate::chat::Utterance;
use crate::stopwords;
use crate::synth::EditOp;
use crate::text;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DetectError {
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("coverage is undefined for an empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionConfig {
    pub anchor_min_shared: usize,
    pub jaccard_min: f64,
    pub max_gap: usize,
    pub min_set_size: usize,
    pub same_speaker: bool,
    pub stopwords: HashSet<String>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            anchor_min_shared: 2,
            jaccard_min: 0.33,
            max_gap: 1,
            min_set_size: 2,
            same_speaker: true,
            stopwords: stopwords::default_stopwords(),
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(0.0..=1.0).contains(&self.jaccard_min) || self.jaccard_min.is_nan() {
            return Err(DetectError::Config(format!(
                "jaccard_min must be in [0, 1], got {}",
                self.jaccard_min
            )));
        }
        if self.min_set_size < 2 {
            return Err(DetectError::Config(format!(
                "min_set_size must be at least 2, got {}",
                self.min_set_size
            )));
        }
        if self.anchor_min_shared < 1 {
            return Err(DetectError::Config(
                "anchor_min_shared must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapScore {
    pub shared: BTreeSet<String>,
    pub jaccard: f64,
}

fn overlap_of(a: &BTreeSet<String>, b: &BTreeSet<String>) -> OverlapScore {
    let shared: BTreeSet<String> = a.intersection(b).cloned().collect();
    let union = a.union(b).count();
    let jaccard = if union == 0 {
        0.0
    } else {
        shared.len() as f64 / union as f64
    };
    OverlapScore { shared, jaccard }
}

/// Content-word overlap of two utterances (case-folded, punctuation stripped).
pub fn anchor_overlap(a: &Utterance, b: &Utterance, stopwords: &HashSet<String>) -> OverlapScore {
    overlap_of(
        &text::content_words(&a.text, stopwords),
        &text::content_words(&b.text, stopwords),
    )
}

/// Origin of a variation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Natural,
    Synthetic,
}

/// A member of a variation set: a corpus utterance (natural sets, and the
/// source of a synthetic set) or a generated variant with its edit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetMember {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edit_ops: Vec<EditOp>,
}

impl SetMember {
    pub fn word_count(&self) -> usize {
        text::word_count(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationSet {
    pub set_id: usize,
    pub origin: Origin,
    pub members: Vec<SetMember>,
    pub anchors: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shortfall: bool,
}

impl VariationSet {
    pub fn word_count(&self) -> usize {
        self.members.iter().map(SetMember::word_count).sum()
    }

    /// Corpus indices of the members, in member order (natural sets).
    pub fn member_indices(&self) -> Vec<usize> {
        self.members.iter().filter_map(|m| m.index).collect()
    }
}

/// Content words that occur in at least two of `members`, sorted.
pub fn shared_anchors(content: &[&BTreeSet<String>]) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for set in content {
        for w in set.iter() {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c >= 2)
        .map(|(w, _)| w.to_string())
        .collect()
}

struct OpenSet {
    members: Vec<usize>,
    speaker: String,
}

fn links(a: &BTreeSet<String>, b: &BTreeSet<String>, cfg: &DetectionConfig) -> bool {
    let s = overlap_of(a, b);
    !s.shared.is_empty()
        && (s.shared.len() >= cfg.anchor_min_shared || s.jaccard >= cfg.jaccard_min)
}

pub fn detect_variation_sets(
    utterances: &[Utterance],
    cfg: &DetectionConfig,
) -> Result<Vec<VariationSet>, DetectError> {
    cfg.validate()?;
    let content: Vec<BTreeSet<String>> = utterances
        .iter()
        .map(|u| text::content_words(&u.text, &cfg.stopwords))
        .collect();

    let mut closed: Vec<OpenSet> = Vec::new();
    // kept in creation order, so the first match is the earliest set
    let mut open: Vec<OpenSet> = Vec::new();

    for (i, u) in utterances.iter().enumerate() {
        let (still_open, expired): (Vec<_>, Vec<_>) = open
            .into_iter()
            .partition(|s| i - *s.members.last().unwrap() - 1 <= cfg.max_gap);
        open = still_open;
        closed.extend(expired);

        let joined = open.iter_mut().find(|s| {
            if cfg.same_speaker && s.speaker != u.speaker {
                return false;
            }
            let last = *s.members.last().unwrap();
            if content[i].is_disjoint(&content[last]) {
                return false;
            }
            s.members
                .iter()
                .any(|&m| links(&content[i], &content[m], cfg))
        });
        match joined {
            Some(s) => s.members.push(i),
            None => open.push(OpenSet {
                members: vec![i],
                speaker: u.speaker.clone(),
            }),
        }
    }
    closed.extend(open);
    closed.sort_by_key(|s| s.members[0]);

    Ok(closed
        .into_iter()
        .filter(|s| s.members.len() >= cfg.min_set_size)
        .enumerate()
        .map(|(set_id, s)| {
            let sets: Vec<&BTreeSet<String>> = s.members.iter().map(|&m| &content[m]).collect();
            VariationSet {
                set_id,
                origin: Origin::Natural,
                anchors: shared_anchors(&sets),
                members: s
                    .members
                    .iter()
                    .map(|&m| SetMember {
                        index: Some(m),
                        text: utterances[m].text.clone(),
                        edit_ops: Vec::new(),
                    })
                    .collect(),
                shortfall: false,
            }
        })
        .collect())
}

/// Fraction of corpus words that fall inside detected set members.
pub fn vs_coverage(utterances: &[Utterance], cfg: &DetectionConfig) -> Result<f64, DetectError> {
    let total: usize = utterances.iter().map(Utterance::word_count).sum();
    if utterances.is_empty() || total == 0 {
        return Err(DetectError::EmptyCorpus);
    }
    let sets = detect_variation_sets(utterances, cfg)?;
    let covered: usize = sets
        .iter()
        .flat_map(|s| s.member_indices())
        .map(|i| utterances[i].word_count())
        .sum();
    Ok(covered as f64 / total as f64)
}
