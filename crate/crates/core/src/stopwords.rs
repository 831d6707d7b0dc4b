use std::collections::HashSet;
use std::path::Path;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Parse a stopword list: one word per line, `#` starts a comment, blank lines ignored.
pub fn parse(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn default_stopwords() -> HashSet<String> {
    parse(DEFAULT_STOPWORDS)
}

pub fn load(path: &Path) -> std::io::Result<HashSet<String>> {
    Ok(parse(&std::fs::read_to_string(path)?))
}
