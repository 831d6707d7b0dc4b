//! Word-level helpers shared by ingest, detection and synthesis.

use std::collections::{BTreeSet, HashSet};

pub const TERMINALS: [char; 3] = ['.', '?', '!'];

/// Characters trimmed from both ends of a token before comparison.
fn is_edge_punct(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | '?' | '!' | ';' | ':' | '"' | '(' | ')' | '\u{201c}' | '\u{201d}'
    )
}

/// Case-folded form of a token with surrounding punctuation removed.
/// Internal apostrophes ("here's") are kept.
pub fn fold_word(token: &str) -> String {
    token.trim_matches(is_edge_punct).to_lowercase()
}

/// Split one trailing terminal mark off a token: `"straw?"` → `("straw", Some('?'))`.
pub fn split_terminal(token: &str) -> (&str, Option<char>) {
    match token.chars().last() {
        Some(c) if TERMINALS.contains(&c) => (&token[..token.len() - c.len_utf8()], Some(c)),
        _ => (token, None),
    }
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn is_question(text: &str) -> bool {
    text.trim_end().ends_with('?')
}

/// Content words of `text`: folded tokens that are non-empty and not stopwords.
pub fn content_words(text: &str, stopwords: &HashSet<String>) -> BTreeSet<String> {
    text.split_whitespace()
        .map(fold_word)
        .filter(|w| !w.is_empty() && !stopwords.contains(w))
        .collect()
}
