//! Rule-based synthesis of variation sets.
//!
//! A synthetic set is a source utterance followed by `n_variants` variants,
//! each derived from the source by one to `max_ops_per_variant` edits:
//! lexicon substitution, phrase addition or deletion, chunk reordering and
//! declarative/interrogative transformation. Every variant carries its edit
//! log, and replaying the log through [`apply_edit`] from the source words
//! reproduces the variant exactly.
//!
//! One content word of the source (the *pinned anchor*) is protected from
//! edits, so every pair of members shares at least that anchor.
//!
//! Question form is planned per set: the number of question variants is
//! chosen (with randomized rounding) so that the expected fraction of
//! question members, source included, equals `question_ratio_target`.

use crate::chat::Utterance;
use crate::detect::{self, Origin, SetMember, VariationSet};
use crate::lexicon::{Lexicon, Slot};
use crate::rng::{derive_seed, DetRng};
use crate::stopwords;
use crate::text::{self, fold_word, split_terminal, TERMINALS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Substitute,
    AddPhrase,
    DeletePhrase,
    Reorder,
    QuestionTransform,
}

/// One edit applied to a word list.
///
/// `span` is an inclusive word-index range of the list the edit applies to.
/// For `add_phrase` it is the insertion point `[k, k]`, where `k` may equal
/// the list length (append before the terminal mark). `question_transform`
/// replaces its span when it carries a replacement and always toggles the
/// terminal mark between `?` and `.`; without a replacement it is an
/// intonation-only change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<Vec<String>>,
}

impl EditOp {
    pub fn new(kind: EditKind, start: usize, end: usize, replacement: Option<Vec<String>>) -> Self {
        Self {
            kind,
            span: [start, end],
            replacement,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("span [{start}, {end}] out of bounds for {len} words")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{0:?} requires a non-empty replacement")]
    MissingReplacement(EditKind),
    #[error("{0:?} must not carry a replacement")]
    UnexpectedReplacement(EditKind),
    #[error("substitution replaces a span with itself")]
    IdentitySubstitution,
    #[error("no comma or coordinator to pivot on inside the reorder span")]
    NoReorderPivot,
    #[error("edit would leave an empty utterance")]
    EmptyResult,
    #[error("source {0:?} has no content word to anchor a set on")]
    NoContentWords(String),
    #[error("no valid variant could be produced for {0:?}")]
    NoVariants(String),
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_variants: usize,
    pub question_ratio_target: f64,
    pub max_ops_per_variant: usize,
    pub lexicon: Arc<Lexicon>,
    pub seed: u64,
    pub stopwords: Arc<HashSet<String>>,
    /// Attempts allowed per requested variant before giving up on it.
    pub max_attempts_per_variant: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_variants: 5,
            question_ratio_target: 0.48,
            max_ops_per_variant: 2,
            lexicon: Arc::new(crate::lexicon::default_lexicon().clone()),
            seed: 0,
            stopwords: Arc::new(stopwords::default_stopwords()),
            max_attempts_per_variant: 40,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_variants < 1 {
            return Err(SynthError::Config("n_variants must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.question_ratio_target) {
            return Err(SynthError::Config(format!(
                "question_ratio_target must be in [0, 1], got {}",
                self.question_ratio_target
            )));
        }
        if self.max_ops_per_variant < 1 {
            return Err(SynthError::Config(
                "max_ops_per_variant must be at least 1".into(),
            ));
        }
        if self.lexicon.is_empty() {
            return Err(SynthError::Config("lexicon is empty".into()));
        }
        Ok(())
    }
}

/// Words with the utterance-final mark split off.
struct Body {
    words: Vec<String>,
    terminal: Option<char>,
}

fn detach(words: &[String]) -> Body {
    let mut words = words.to_vec();
    let mut terminal = None;
    if let Some(last) = words.last_mut() {
        let (bare, t) = split_terminal(last);
        if let Some(t) = t {
            terminal = Some(t);
            *last = bare.to_string();
        }
        if last.is_empty() {
            words.pop();
        }
    }
    Body { words, terminal }
}

fn attach(body: Body) -> Vec<String> {
    let mut words = body.words;
    if let (Some(t), Some(last)) = (body.terminal, words.last_mut()) {
        while last.ends_with(',') {
            last.pop();
        }
        last.push(t);
    }
    words
}

fn strip_terminals(words: &[String]) -> Vec<String> {
    words
        .iter()
        .map(|w| w.trim_end_matches(TERMINALS).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

fn starts_upper(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase)
}

fn upper_first(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn lower_first(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn keeps_capital(w: &str) -> bool {
    w == "I" || w.starts_with("I'")
}

fn is_coordinator(folded: &str) -> bool {
    matches!(folded, "and" | "or")
}

/// Apply one edit to a word list. Terminal punctuation stays on the final word.
pub fn apply_edit(words: &[String], op: &EditOp) -> Result<Vec<String>, SynthError> {
    let mut body = detach(words);
    let n = body.words.len();
    let [start, end] = op.span;
    let oob = SynthError::SpanOutOfBounds {
        start,
        end,
        len: words.len(),
    };
    let in_bounds = match op.kind {
        EditKind::AddPhrase => start == end && start <= n,
        _ => start <= end && end < n,
    };
    if !in_bounds {
        return Err(oob);
    }
    let replacement = op.replacement.as_deref().map(strip_terminals);
    let first_was_upper = body.words.first().is_some_and(|w| starts_upper(w));

    match op.kind {
        EditKind::Substitute => {
            let mut rep = replacement
                .filter(|r| !r.is_empty())
                .ok_or(SynthError::MissingReplacement(op.kind))?;
            let old: Vec<String> = body.words[start..=end]
                .iter()
                .map(|w| fold_word(w))
                .collect();
            let new: Vec<String> = rep.iter().map(|w| fold_word(w)).collect();
            if old == new {
                return Err(SynthError::IdentitySubstitution);
            }
            if start == 0 && first_was_upper && !starts_upper(&rep[0]) {
                rep[0] = upper_first(&rep[0]);
            }
            body.words.splice(start..=end, rep);
        }
        EditKind::AddPhrase => {
            let mut rep = replacement
                .filter(|r| !r.is_empty())
                .ok_or(SynthError::MissingReplacement(op.kind))?;
            if start == 0 && first_was_upper {
                rep[0] = upper_first(&rep[0]);
                if !keeps_capital(&body.words[0]) {
                    body.words[0] = lower_first(&body.words[0]);
                }
            }
            body.words.splice(start..start, rep);
        }
        EditKind::DeletePhrase => {
            if op.replacement.is_some() {
                return Err(SynthError::UnexpectedReplacement(op.kind));
            }
            if end - start + 1 == n {
                return Err(SynthError::EmptyResult);
            }
            body.words.drain(start..=end);
            if start == 0 && first_was_upper && !keeps_capital(&body.words[0]) {
                body.words[0] = upper_first(&body.words[0]);
            }
        }
        EditKind::Reorder => {
            if op.replacement.is_some() {
                return Err(SynthError::UnexpectedReplacement(op.kind));
            }
            let span = &body.words[start..=end];
            let pivot_len;
            let comma = span[..span.len() - 1].iter().position(|w| w.ends_with(','));
            let reordered = if let Some(k) = comma {
                pivot_len = k + 1;
                let mut a: Vec<String> = span[..=k].to_vec();
                let mut b: Vec<String> = span[k + 1..].to_vec();
                if !b.last().unwrap().ends_with(',') {
                    b.last_mut().unwrap().push(',');
                    a.last_mut().unwrap().pop();
                }
                b.into_iter().chain(a).collect::<Vec<_>>()
            } else if let Some(k) =
                (1..span.len().saturating_sub(1)).find(|&k| is_coordinator(&fold_word(&span[k])))
            {
                pivot_len = k;
                let a = &span[..k];
                let b = &span[k + 1..];
                b.iter()
                    .cloned()
                    .chain(std::iter::once(span[k].clone()))
                    .chain(a.iter().cloned())
                    .collect()
            } else {
                return Err(SynthError::NoReorderPivot);
            };
            let mut reordered = reordered;
            if start == 0 && first_was_upper {
                // the old first word ends up at the head of the moved-back chunk
                let old_first = reordered.len() - pivot_len;
                if !keeps_capital(&reordered[old_first]) {
                    reordered[old_first] = lower_first(&reordered[old_first]);
                }
                reordered[0] = upper_first(&reordered[0]);
            }
            body.words.splice(start..=end, reordered);
        }
        EditKind::QuestionTransform => {
            if let Some(mut rep) = replacement {
                if rep.is_empty() {
                    return Err(SynthError::MissingReplacement(op.kind));
                }
                if start == 0 && first_was_upper && !starts_upper(&rep[0]) {
                    rep[0] = upper_first(&rep[0]);
                }
                body.words.splice(start..=end, rep);
            }
            body.terminal = Some(if body.terminal == Some('?') { '.' } else { '?' });
        }
    }
    if body.words.is_empty() {
        return Err(SynthError::EmptyResult);
    }
    Ok(attach(body))
}

/// Replay an edit log from `source`.
pub fn replay(source: &[String], ops: &[EditOp]) -> Result<Vec<String>, SynthError> {
    ops.iter()
        .try_fold(source.to_vec(), |w, op| apply_edit(&w, op))
}

/// Structural check that `variant` is a usable rephrasing of `source`.
pub fn validate_variant(
    source: &Utterance,
    variant: &[String],
    ops: &[EditOp],
    stopwords: &HashSet<String>,
) -> bool {
    if ops.is_empty() {
        return false;
    }
    let joined = variant.join(" ");
    if joined == source.text {
        return false;
    }
    let len = source.word_count() as f64;
    let vlen = variant.len() as f64;
    if vlen < f64::max(3.0, 0.5 * len) || vlen > 2.0 * len {
        return false;
    }
    let v = Utterance::new(
        joined,
        source.speaker.clone(),
        source.source_file.clone(),
        source.source_line,
    );
    !detect::anchor_overlap(source, &v, stopwords)
        .shared
        .is_empty()
}

fn phrase_positions(folded: &[String], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > folded.len() {
        return Vec::new();
    }
    (0..=folded.len() - phrase.len())
        .filter(|&p| folded[p..p + phrase.len()] == *phrase)
        .collect()
}

const DETERMINERS: [&str; 12] = [
    "the", "a", "an", "your", "my", "his", "her", "our", "their", "some", "this", "that",
];

/// Candidate non-question edits for `words`, grouped by kind.
fn candidate_edits(words: &[String], lex: &Lexicon, pinned: &str) -> Vec<Vec<EditOp>> {
    let body = detach(words);
    let bw = &body.words;
    let n = bw.len();
    let folded: Vec<String> = bw.iter().map(|w| fold_word(w)).collect();

    let mut subs = Vec::new();
    for k in 0..n {
        if folded[k] == pinned {
            continue;
        }
        if let Some(alts) = lex.substitutions.get(&folded[k]) {
            for alt in alts {
                let mut rep = alt.clone();
                if bw[k].ends_with(',') {
                    rep.last_mut().unwrap().push(',');
                }
                subs.push(EditOp::new(EditKind::Substitute, k, k, Some(rep)));
            }
        }
    }

    let mut adds = Vec::new();
    let mut dels = Vec::new();
    for phrase in &lex.addable_phrases {
        let pf: Vec<String> = phrase.words.iter().map(|w| fold_word(w)).collect();
        let found = phrase_positions(&folded, &pf);
        if found.is_empty() {
            let at = match phrase.slot {
                Slot::Start => 0,
                Slot::End => n,
            };
            adds.push(EditOp::new(
                EditKind::AddPhrase,
                at,
                at,
                Some(phrase.words.clone()),
            ));
        }
        for p in found {
            let e = p + pf.len() - 1;
            let at_slot = match phrase.slot {
                Slot::Start => p == 0,
                Slot::End => e == n - 1,
            };
            if at_slot && pf.len() < n && !folded[p..=e].iter().any(|w| w == pinned) {
                dels.push(EditOp::new(EditKind::DeletePhrase, p, e, None));
            }
        }
    }

    let mut reorders = Vec::new();
    for k in 0..n.saturating_sub(1) {
        if !bw[k].ends_with(',') {
            continue;
        }
        let a_start = (0..k)
            .rev()
            .find(|&j| bw[j].ends_with(','))
            .map_or(0, |j| j + 1);
        let b_end = (k + 1..n).find(|&m| bw[m].ends_with(',')).unwrap_or(n - 1);
        reorders.push(EditOp::new(EditKind::Reorder, a_start, b_end, None));
    }
    for k in 2..n.saturating_sub(2) {
        let dets = DETERMINERS.contains(&folded[k - 2].as_str())
            && DETERMINERS.contains(&folded[k + 1].as_str());
        let no_commas = bw[k - 2..=k + 2].iter().all(|w| !w.ends_with(','));
        if is_coordinator(&folded[k]) && dets && no_commas {
            reorders.push(EditOp::new(EditKind::Reorder, k - 2, k + 2, None));
        }
    }

    [subs, adds, dels, reorders]
        .into_iter()
        .filter(|g| !g.is_empty())
        .collect()
}

/// The question-form edit for `words`: an auxiliary-table rewrite when one
/// applies (earliest match, then longest), else an intonation-only toggle.
fn question_edit(words: &[String], lex: &Lexicon) -> EditOp {
    let body = detach(words);
    let to_question = body.terminal != Some('?');
    let folded: Vec<String> = body.words.iter().map(|w| fold_word(w)).collect();
    let mut best: Option<(usize, usize, &Vec<String>)> = None;
    for pat in &lex.auxiliary_table {
        let (from, to) = if to_question {
            (&pat.declarative, &pat.interrogative)
        } else {
            (&pat.interrogative, &pat.declarative)
        };
        if let Some(&p) = phrase_positions(&folded, from).first() {
            let better = match best {
                None => true,
                Some((bp, blen, _)) => p < bp || (p == bp && from.len() > blen),
            };
            if better {
                best = Some((p, from.len(), to));
            }
        }
    }
    match best {
        Some((p, len, to)) => {
            let mut rep = to.clone();
            if body.words[p + len - 1].ends_with(',') {
                rep.last_mut().unwrap().push(',');
            }
            EditOp::new(EditKind::QuestionTransform, p, p + len - 1, Some(rep))
        }
        None => {
            let last = words.len().saturating_sub(1);
            EditOp::new(EditKind::QuestionTransform, last, last, None)
        }
    }
}

/// Content word of the source that edits must preserve: the first one with
/// no lexicon substitution and outside every phrase, else the first one.
fn pinned_anchor(source: &Utterance, lex: &Lexicon, stopwords: &HashSet<String>) -> Option<String> {
    let content: Vec<String> = source
        .words
        .iter()
        .map(|w| fold_word(w))
        .filter(|w| !w.is_empty() && !stopwords.contains(w))
        .collect();
    let in_phrase = |w: &str| {
        lex.addable_phrases
            .iter()
            .any(|p| p.words.iter().any(|pw| fold_word(pw) == w))
    };
    content
        .iter()
        .find(|w| !lex.substitutions.contains_key(*w) && !in_phrase(w))
        .or(content.first())
        .cloned()
}

fn question_plan(rng: &mut DetRng, source_is_question: bool, cfg: &SynthConfig) -> Vec<bool> {
    let n = cfg.n_variants;
    let wanted =
        cfg.question_ratio_target * (n + 1) as f64 - f64::from(u8::from(source_is_question));
    let wanted = wanted.clamp(0.0, n as f64);
    let mut k = wanted.floor() as usize;
    if rng.chance(wanted - wanted.floor()) {
        k += 1;
    }
    let mut plan: Vec<bool> = (0..n).map(|i| i < k.min(n)).collect();
    rng.shuffle(&mut plan);
    plan
}

fn one_variant(
    rng: &mut DetRng,
    source: &Utterance,
    want_question: bool,
    pinned: &str,
    cfg: &SynthConfig,
) -> Option<(Vec<String>, Vec<EditOp>)> {
    let n_ops = 1 + rng.index(cfg.max_ops_per_variant);
    let mut cur = source.words.clone();
    let mut ops = Vec::with_capacity(n_ops);
    if want_question != source.is_question {
        let op = question_edit(&cur, &cfg.lexicon);
        cur = apply_edit(&cur, &op).ok()?;
        ops.push(op);
    }
    while ops.len() < n_ops {
        let mut groups = candidate_edits(&cur, &cfg.lexicon, pinned);
        // one substitution per variant, so words are never re-substituted
        if ops.iter().any(|o| o.kind == EditKind::Substitute) {
            groups.retain(|g| g[0].kind != EditKind::Substitute);
        }
        if groups.is_empty() {
            break;
        }
        let group = &groups[rng.index(groups.len())];
        let op = group[rng.index(group.len())].clone();
        match apply_edit(&cur, &op) {
            Ok(next) => {
                cur = next;
                ops.push(op);
            }
            Err(_) => break,
        }
    }
    if ops.is_empty() {
        return None;
    }
    Some((cur, ops))
}

fn synthesize_seeded(
    source: &Utterance,
    source_index: Option<usize>,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<VariationSet, SynthError> {
    cfg.validate()?;
    let pinned = pinned_anchor(source, &cfg.lexicon, &cfg.stopwords)
        .ok_or_else(|| SynthError::NoContentWords(source.text.clone()))?;
    let mut rng = DetRng::new(seed);
    let plan = question_plan(&mut rng, source.is_question, cfg);

    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(source.text.clone());
    let mut members = vec![SetMember {
        index: source_index,
        text: source.text.clone(),
        edit_ops: Vec::new(),
    }];
    let mut shortfall = false;
    for &want_q in &plan {
        let mut produced = false;
        for _ in 0..cfg.max_attempts_per_variant {
            let Some((words, ops)) = one_variant(&mut rng, source, want_q, &pinned, cfg) else {
                continue;
            };
            let text = words.join(" ");
            let keeps_pin = text::content_words(&text, &cfg.stopwords).contains(&pinned);
            if keeps_pin
                && !seen.contains(&text)
                && text::is_question(&text) == want_q
                && validate_variant(source, &words, &ops, &cfg.stopwords)
            {
                seen.insert(text.clone());
                members.push(SetMember {
                    index: None,
                    text,
                    edit_ops: ops,
                });
                produced = true;
                break;
            }
        }
        shortfall |= !produced;
    }
    if members.len() < 2 {
        return Err(SynthError::NoVariants(source.text.clone()));
    }
    let content: Vec<BTreeSet<String>> = members
        .iter()
        .map(|m| text::content_words(&m.text, &cfg.stopwords))
        .collect();
    let refs: Vec<&BTreeSet<String>> = content.iter().collect();
    Ok(VariationSet {
        set_id: 0,
        origin: Origin::Synthetic,
        anchors: detect::shared_anchors(&refs),
        members,
        shortfall,
    })
}

/// Build one synthetic set from `source`, seeded by `cfg.seed`.
pub fn synthesize_variants(
    source: &Utterance,
    cfg: &SynthConfig,
) -> Result<VariationSet, SynthError> {
    synthesize_seeded(source, None, cfg, cfg.seed)
}

#[derive(Debug, Clone, Default)]
pub struct SynthPool {
    pub sets: Vec<VariationSet>,
    /// Sources that produced no set, by index into the input.
    pub skipped: Vec<(usize, SynthError)>,
}

/// Synthesize a set for every source in parallel. Source `i` is seeded with
/// `derive_seed(cfg.seed, i)`, so the result does not depend on thread count.
/// Sets are numbered densely in source order.
pub fn synthesize_pool(sources: &[Utterance], cfg: &SynthConfig) -> Result<SynthPool, SynthError> {
    cfg.validate()?;
    let results: Vec<Result<VariationSet, SynthError>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| synthesize_seeded(s, Some(i), cfg, derive_seed(cfg.seed, i as u64)))
        .collect();
    let mut pool = SynthPool::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut set) => {
                set.set_id = pool.sets.len();
                pool.sets.push(set);
            }
            Err(e) => pool.skipped.push((i, e)),
        }
    }
    Ok(pool)
}
