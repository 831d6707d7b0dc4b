//! CHAT transcript ingestion.
//!
//! Only main tiers (`*XXX:`) are read; headers (`@`) and dependent tiers (`%`)
//! are dropped, and tab-indented continuation lines are joined to the tier
//! they continue. Each kept main tier is cleaned by a fixed, ordered rule list
//! (version [`CLEANING_RULES_VERSION`]):
//!
//! 1. media bullets (`\u{15}…\u{15}`) are removed;
//! 2. bracketed codes are removed; a retrace code (`[/]`, `[//]`, `[///]`,
//!    `[/-]`, `[/?]`) also removes the word or `<…>` group it scopes, so the
//!    utterance keeps only its final form; `[: target]` keeps the spoken form;
//! 3. `&`-prefixed events, fillers and fragments are removed;
//! 4. `xxx`/`yyy`/`www` (and `xx`/`yy`) markers, `0`-prefixed omitted words,
//!    pauses such as `(.)`, separators `„`/`‡`/`;` and `+` linkers are removed;
//! 5. inside words, `@` suffixes are cut, shortening parentheses are opened
//!    (`(be)cause` → `because`), prosodic marks (`:` `^` `↑` `↓` `"`) are
//!    removed and compound joiners (`+`, `_`) become spaces;
//! 6. the utterance terminator is normalised to `.`, `?` or `!` (any `+…`
//!    terminator maps by its final mark) and glued to the last word; commas are
//!    glued to the word before them.
//!
//! Rule 6 makes "Uh oh ." count as two words, which is the reading the
//! three-word filter expects.

use crate::jsonl::{self, JsonlError};
use crate::text;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const CLEANING_RULES_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{file}: input is not UTF-8 text (invalid byte at offset {offset})")]
    NotText { file: String, offset: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Records {
        path: PathBuf,
        #[source]
        source: JsonlError,
    },
    #[error("{0}: no .cha files found")]
    NoTranscripts(PathBuf),
}

/// One cleaned main-tier utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "UtteranceRecord", into = "UtteranceRecord")]
pub struct Utterance {
    pub text: String,
    pub words: Vec<String>,
    pub speaker: String,
    pub source_file: String,
    pub source_line: u32,
    pub is_question: bool,
}

impl Utterance {
    pub fn new(
        text: impl Into<String>,
        speaker: impl Into<String>,
        source_file: impl Into<String>,
        source_line: u32,
    ) -> Self {
        let text = text.into();
        Self {
            words: text::words(&text),
            is_question: text::is_question(&text),
            text,
            speaker: speaker.into(),
            source_file: source_file.into(),
            source_line,
        }
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }
}

/// On-disk form of an utterance; `words` and `is_question` are derived on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    text: String,
    speaker: String,
    source_file: String,
    source_line: u32,
}

impl From<UtteranceRecord> for Utterance {
    fn from(r: UtteranceRecord) -> Self {
        Utterance::new(r.text, r.speaker, r.source_file, r.source_line)
    }
}

impl From<Utterance> for UtteranceRecord {
    fn from(u: Utterance) -> Self {
        UtteranceRecord {
            text: u.text,
            speaker: u.speaker,
            source_file: u.source_file,
            source_line: u.source_line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub file_id: String,
    pub utterances: Vec<Utterance>,
}

/// Which main tiers to keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TierFilter {
    Keep(BTreeSet<String>),
    Exclude(BTreeSet<String>),
}

impl Default for TierFilter {
    /// Every tier except the target child's.
    fn default() -> Self {
        TierFilter::Exclude(["CHI".to_string()].into_iter().collect())
    }
}

impl TierFilter {
    pub fn keep<I: IntoIterator<Item = S>, S: Into<String>>(codes: I) -> Self {
        TierFilter::Keep(codes.into_iter().map(Into::into).collect())
    }

    pub fn admits(&self, code: &str) -> bool {
        match self {
            TierFilter::Keep(set) => set.contains(code),
            TierFilter::Exclude(set) => !set.contains(code),
        }
    }
}

/// Recoverable problems met while parsing one file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    /// 1-based line numbers of lines that were skipped as malformed.
    pub malformed_lines: Vec<u32>,
    pub excluded_tier_lines: usize,
    pub empty_after_cleaning: usize,
}

impl ParseReport {
    pub fn merge(&mut self, other: &ParseReport) {
        self.malformed_lines
            .extend_from_slice(&other.malformed_lines);
        self.excluded_tier_lines += other.excluded_tier_lines;
        self.empty_after_cleaning += other.empty_after_cleaning;
    }
}

struct MainTier {
    code: String,
    line: u32,
    content: String,
}

pub fn parse_chat(
    raw: &[u8],
    file_id: &str,
    tiers: &TierFilter,
) -> Result<(Transcript, ParseReport), IngestError> {
    let src = std::str::from_utf8(raw).map_err(|e| IngestError::NotText {
        file: file_id.to_string(),
        offset: e.valid_up_to(),
    })?;
    if let Some(offset) = src.find('\0') {
        return Err(IngestError::NotText {
            file: file_id.to_string(),
            offset,
        });
    }

    let mut report = ParseReport::default();
    let mut tiers_found: Vec<MainTier> = Vec::new();
    // whether tab-continuations currently extend the last main tier
    let mut continuing_main = false;

    for (i, raw_line) in src.lines().enumerate() {
        let lineno = (i + 1) as u32;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.starts_with('\t') {
            if continuing_main {
                if let Some(last) = tiers_found.last_mut() {
                    last.content.push(' ');
                    last.content.push_str(line.trim());
                }
            }
            continue;
        }
        continuing_main = false;
        if line.trim().is_empty() || line.starts_with('@') || line.starts_with('%') {
            continue;
        }
        let Some(rest) = line.strip_prefix('*') else {
            report.malformed_lines.push(lineno);
            continue;
        };
        let Some((code, content)) = rest.split_once(':') else {
            report.malformed_lines.push(lineno);
            continue;
        };
        if code.is_empty() || !code.chars().all(|c| c.is_ascii_alphanumeric()) {
            report.malformed_lines.push(lineno);
            continue;
        }
        tiers_found.push(MainTier {
            code: code.to_string(),
            line: lineno,
            content: content.trim().to_string(),
        });
        continuing_main = true;
    }

    let mut utterances = Vec::new();
    for t in tiers_found {
        if !tiers.admits(&t.code) {
            report.excluded_tier_lines += 1;
            continue;
        }
        match clean_utterance(&t.content) {
            Some(text) => utterances.push(Utterance::new(text, t.code, file_id, t.line)),
            None => report.empty_after_cleaning += 1,
        }
    }
    Ok((
        Transcript {
            file_id: file_id.to_string(),
            utterances,
        },
        report,
    ))
}

enum Item {
    Word(String),
    Open,
    Close,
    Code(String),
}

fn lex(content: &str) -> Vec<Item> {
    let mut items = Vec::new();
    let mut word = String::new();
    let mut chars = content.chars().peekable();
    let flush = |word: &mut String, items: &mut Vec<Item>| {
        if !word.is_empty() {
            items.push(Item::Word(std::mem::take(word)));
        }
    };
    while let Some(c) = chars.next() {
        match c {
            '\u{15}' => {
                flush(&mut word, &mut items);
                // skip to the closing bullet
                for d in chars.by_ref() {
                    if d == '\u{15}' {
                        break;
                    }
                }
            }
            '[' => {
                flush(&mut word, &mut items);
                let mut code = String::new();
                for d in chars.by_ref() {
                    if d == ']' {
                        break;
                    }
                    code.push(d);
                }
                items.push(Item::Code(code.trim().to_string()));
            }
            '<' => {
                flush(&mut word, &mut items);
                items.push(Item::Open);
            }
            '>' => {
                flush(&mut word, &mut items);
                items.push(Item::Close);
            }
            c if c.is_whitespace() => flush(&mut word, &mut items),
            c => word.push(c),
        }
    }
    flush(&mut word, &mut items);
    items
}

fn is_retrace(code: &str) -> bool {
    matches!(code, "/" | "//" | "///" | "/-" | "/?")
}

/// Resolve groups and codes into the final-form token list.
fn resolve_codes(items: Vec<Item>) -> Vec<String> {
    // each unit is a word or a whole <...> group
    let mut stack: Vec<Vec<Vec<String>>> = vec![Vec::new()];
    for item in items {
        match item {
            Item::Word(w) => stack.last_mut().unwrap().push(vec![w]),
            Item::Open => stack.push(Vec::new()),
            Item::Close => {
                if stack.len() > 1 {
                    let group: Vec<String> = stack.pop().unwrap().into_iter().flatten().collect();
                    stack.last_mut().unwrap().push(group);
                }
            }
            Item::Code(code) => {
                if is_retrace(&code) {
                    stack.last_mut().unwrap().pop();
                }
            }
        }
    }
    // unbalanced '<' simply falls through as plain words
    stack.into_iter().flatten().flatten().collect()
}

fn is_unintelligible(w: &str) -> bool {
    let base = w.split('@').next().unwrap_or(w).to_ascii_lowercase();
    matches!(base.as_str(), "xxx" | "yyy" | "www" | "xx" | "yy")
}

fn is_pause(w: &str) -> bool {
    w.len() >= 3
        && w.starts_with('(')
        && w.ends_with(')')
        && w[1..w.len() - 1]
            .chars()
            .all(|c| c == '.' || c == ':' || c.is_ascii_digit())
}

fn terminal_of(token: &str) -> char {
    if token.contains('?') {
        '?'
    } else if token.contains('!') {
        '!'
    } else {
        '.'
    }
}

enum Tok {
    Word(String),
    Comma,
    Terminal(char),
}

fn classify(token: &str, out: &mut Vec<Tok>) {
    if token.starts_with('&') || is_unintelligible(token) || is_pause(token) {
        return;
    }
    if token.starts_with('0')
        && token.len() > 1
        && token[1..].starts_with(|c: char| c.is_alphabetic())
    {
        return;
    }
    if token == "0" || token == "„" || token == "‡" || token == ";" {
        return;
    }
    if token.starts_with('+') {
        if token.ends_with(['.', '?', '!']) {
            out.push(Tok::Terminal(terminal_of(token)));
        }
        return;
    }
    if token.chars().all(|c| matches!(c, '.' | '?' | '!')) {
        out.push(Tok::Terminal(terminal_of(token)));
        return;
    }
    if token == "," {
        out.push(Tok::Comma);
        return;
    }

    // word-internal cleanup
    let mut body = token.split('@').next().unwrap_or("").to_string();
    let mut trailing = Vec::new();
    loop {
        match body.chars().last() {
            Some(c @ ('.' | '?' | '!')) => {
                trailing.push(Tok::Terminal(terminal_of(&c.to_string())));
                body.pop();
            }
            Some(',') => {
                trailing.push(Tok::Comma);
                body.pop();
            }
            _ => break,
        }
    }
    let cleaned: String = body
        .chars()
        .filter(|c| !matches!(c, '(' | ')' | ':' | '^' | '↑' | '↓' | '"' | '“' | '”' | '≠'))
        .map(|c| if c == '+' || c == '_' { ' ' } else { c })
        .collect();
    for part in cleaned.split_whitespace() {
        if !is_unintelligible(part) {
            out.push(Tok::Word(part.to_string()));
        }
    }
    out.extend(trailing.into_iter().rev());
}

/// Apply the cleaning rules to one main-tier body. `None` if nothing is left.
pub fn clean_utterance(content: &str) -> Option<String> {
    let tokens = resolve_codes(lex(content));
    let mut toks = Vec::new();
    for t in &tokens {
        classify(t, &mut toks);
    }
    let mut words: Vec<String> = Vec::new();
    let mut terminal = None;
    for t in toks {
        match t {
            Tok::Word(w) => words.push(w),
            Tok::Comma => {
                if let Some(last) = words.last_mut() {
                    if !last.ends_with(',') {
                        last.push(',');
                    }
                }
            }
            Tok::Terminal(c) => terminal = Some(c),
        }
    }
    let last = words.last_mut()?;
    while last.ends_with(',') {
        last.pop();
    }
    if let Some(c) = terminal {
        last.push(c);
    }
    Some(words.join(" "))
}

/// Render a transcript back to CHAT main-tier lines, each utterance on its
/// original line number (gaps become blank lines).
pub fn to_chat(transcript: &Transcript) -> String {
    let mut out = String::new();
    let mut line = 1u32;
    for u in &transcript.utterances {
        while line < u.source_line {
            out.push('\n');
            line += 1;
        }
        out.push_str(&format!("*{}:\t{}\n", u.speaker, u.text));
        line += 1;
    }
    out
}

pub fn filter_short(utterances: Vec<Utterance>, min_words: usize) -> Vec<Utterance> {
    utterances
        .into_iter()
        .filter(|u| u.word_count() >= min_words)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetSelection {
    pub utterances: Vec<Utterance>,
    pub word_count: u64,
    pub warning: Option<String>,
}

/// Longest prefix (in transcript order) whose word count stays within `word_budget`.
pub fn select_budget<'a, I>(utterances: I, word_budget: u64) -> BudgetSelection
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let mut out = Vec::new();
    let mut total = 0u64;
    let mut warning = None;
    for u in utterances {
        let w = u.word_count() as u64;
        if total + w > word_budget {
            if out.is_empty() && word_budget > 0 {
                warning = Some(format!(
                    "word budget {word_budget} is smaller than the first utterance ({w} words)"
                ));
            }
            break;
        }
        total += w;
        out.push(u.clone());
    }
    BudgetSelection {
        utterances: out,
        word_count: total,
        warning,
    }
}

pub fn select_budget_transcripts(transcripts: &[Transcript], word_budget: u64) -> BudgetSelection {
    select_budget(transcripts.iter().flat_map(|t| &t.utterances), word_budget)
}

/// Every `.cha` file under `dir` as (relative '/'-joined id, path), sorted by id.
pub fn corpus_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, IngestError> {
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| IngestError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        let p = entry.path();
        let is_cha = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("cha"));
        if entry.file_type().is_file() && is_cha {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            files.push((id, p.to_path_buf()));
        }
    }
    if files.is_empty() {
        return Err(IngestError::NoTranscripts(dir.to_path_buf()));
    }
    files.sort();
    Ok(files)
}

/// Every `.cha` file under `dir`, parsed in parallel and ordered by relative path.
pub fn ingest_dir(
    dir: &Path,
    tiers: &TierFilter,
) -> Result<(Vec<Transcript>, ParseReport), IngestError> {
    let files = corpus_files(dir)?;
    let parsed: Vec<Result<(Transcript, ParseReport), IngestError>> = files
        .par_iter()
        .map(|(id, path)| {
            let raw = std::fs::read(path).map_err(|source| IngestError::Io {
                path: path.clone(),
                source,
            })?;
            parse_chat(&raw, id, tiers)
        })
        .collect();

    let mut transcripts = Vec::with_capacity(parsed.len());
    let mut report = ParseReport::default();
    for r in parsed {
        let (t, rep) = r?;
        report.merge(&rep);
        transcripts.push(t);
    }
    Ok((transcripts, report))
}

pub fn write_utterances<W: Write>(w: W, utterances: &[Utterance]) -> std::io::Result<()> {
    jsonl::write_jsonl(w, utterances)
}

pub fn read_utterances<R: BufRead>(r: R) -> Result<Vec<Utterance>, JsonlError> {
    jsonl::read_jsonl(r)
}

pub fn load_utterances(path: &Path) -> Result<Vec<Utterance>, IngestError> {
    let f = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_utterances(std::io::BufReader::new(f)).map_err(|source| IngestError::Records {
        path: path.to_path_buf(),
        source,
    })
}
