//! Corpus descriptors reported for raw corpora and composed datasets.

use crate::chat::Utterance;
use crate::compose::{Dataset, SequenceKind};
use crate::detect::{self, DetectionConfig};
use crate::text;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Utterances shorter than this many words count as fragments.
pub const FRAGMENT_MAX_WORDS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("cannot describe an empty corpus")]
    Empty,
    #[error(transparent)]
    Detect(#[from] detect::DetectError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub utterance_count: u64,
    pub total_words: u64,
    /// Distinct case-folded word forms.
    pub type_count: u64,
    pub fragment_ratio: f64,
    pub question_ratio: f64,
    pub vs_word_coverage: f64,
}

/// Describe utterances; coverage comes from running the detector over them.
pub fn corpus_stats(
    utterances: &[Utterance],
    det: &DetectionConfig,
) -> Result<CorpusStats, StatsError> {
    let total: u64 = utterances.iter().map(|u| u.word_count() as u64).sum();
    if utterances.is_empty() || total == 0 {
        return Err(StatsError::Empty);
    }
    let coverage = detect::vs_coverage(utterances, det)?;
    Ok(describe(
        utterances.iter().map(|u| u.text.as_str()),
        coverage,
    ))
}

/// Describe a dataset; coverage is the word share of its vs_member lines.
pub fn dataset_stats(d: &Dataset) -> Result<CorpusStats, StatsError> {
    let total = d.total_words();
    if total == 0 {
        return Err(StatsError::Empty);
    }
    let coverage = d.vs_words() as f64 / total as f64;
    debug_assert!(d
        .sequences
        .iter()
        .all(|s| s.kind == SequenceKind::Filler || s.vs_id.is_some()));
    Ok(describe(
        d.sequences.iter().map(|s| s.text.as_str()),
        coverage,
    ))
}

fn describe<'a>(texts: impl Iterator<Item = &'a str>, vs_word_coverage: f64) -> CorpusStats {
    let (mut n, mut words, mut fragments, mut questions) = (0u64, 0u64, 0u64, 0u64);
    let mut types = HashSet::new();
    for t in texts {
        n += 1;
        let ws = text::words(t);
        words += ws.len() as u64;
        if ws.len() < FRAGMENT_MAX_WORDS {
            fragments += 1;
        }
        if text::is_question(t) {
            questions += 1;
        }
        for w in ws {
            let f = text::fold_word(&w);
            if !f.is_empty() {
                types.insert(f);
            }
        }
    }
    CorpusStats {
        utterance_count: n,
        total_words: words,
        type_count: types.len() as u64,
        fragment_ratio: fragments as f64 / n as f64,
        question_ratio: questions as f64 / n as f64,
        vs_word_coverage,
    }
}
