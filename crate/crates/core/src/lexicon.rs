//! The synthesis lexicon and its line-oriented text format.
//!
//! ```text
//! [substitutions]
//! want<TAB>need|like
//! [phrases]
//! too<TAB>end
//! [auxiliary]
//! you can<TAB>can you
//! ```
//!
//! `#` starts a comment. Repeated substitution keys merge their alternatives.

use std::collections::BTreeMap;
use std::path::Path;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: entry is not lowercase: {entry:?}")]
    NotLowercase { line: usize, entry: String },
    #[error("line {line}: {word:?} lists itself as an alternative")]
    SelfMap { line: usize, word: String },
    #[error("lexicon has no substitutions, phrases or auxiliary patterns")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    pub words: Vec<String>,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxPattern {
    pub declarative: Vec<String>,
    pub interrogative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    pub substitutions: BTreeMap<String, Vec<Vec<String>>>,
    pub addable_phrases: Vec<Phrase>,
    pub auxiliary_table: Vec<AuxPattern>,
}

#[derive(Clone, Copy)]
enum Section {
    Substitutions,
    Phrases,
    Auxiliary,
}

fn split_words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn check_lower(line: usize, s: &str) -> Result<(), LexiconError> {
    if s.chars().any(char::is_uppercase) {
        return Err(LexiconError::NotLowercase {
            line,
            entry: s.to_string(),
        });
    }
    Ok(())
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Lexicon::default();
        let mut section = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim_end();
            if body.trim().is_empty() {
                continue;
            }
            let trimmed = body.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                section = Some(match &trimmed[1..trimmed.len() - 1] {
                    "substitutions" => Section::Substitutions,
                    "phrases" => Section::Phrases,
                    "auxiliary" => Section::Auxiliary,
                    other => {
                        return Err(LexiconError::Syntax {
                            line,
                            msg: format!("unknown section [{other}]"),
                        })
                    }
                });
                continue;
            }
            let Some(section) = section else {
                return Err(LexiconError::Syntax {
                    line,
                    msg: "entry before any [section] header".into(),
                });
            };
            let Some((left, right)) = body.split_once('\t') else {
                return Err(LexiconError::Syntax {
                    line,
                    msg: "expected two TAB-separated fields".into(),
                });
            };
            let (left, right) = (left.trim(), right.trim());
            if left.is_empty() || right.is_empty() {
                return Err(LexiconError::Syntax {
                    line,
                    msg: "empty field".into(),
                });
            }
            check_lower(line, left)?;
            check_lower(line, right)?;
            match section {
                Section::Substitutions => {
                    if left.split_whitespace().count() != 1 {
                        return Err(LexiconError::Syntax {
                            line,
                            msg: "substitution key must be a single word".into(),
                        });
                    }
                    let alts = lex.substitutions.entry(left.to_string()).or_default();
                    for alt in right.split('|') {
                        let words = split_words(alt);
                        if words.is_empty() {
                            return Err(LexiconError::Syntax {
                                line,
                                msg: "empty alternative".into(),
                            });
                        }
                        if words.len() == 1 && words[0] == left {
                            return Err(LexiconError::SelfMap {
                                line,
                                word: left.to_string(),
                            });
                        }
                        if !alts.contains(&words) {
                            alts.push(words);
                        }
                    }
                }
                Section::Phrases => {
                    let slot = match right {
                        "start" => Slot::Start,
                        "end" => Slot::End,
                        other => {
                            return Err(LexiconError::Syntax {
                                line,
                                msg: format!("unknown slot {other:?} (expected start|end)"),
                            })
                        }
                    };
                    lex.addable_phrases.push(Phrase {
                        words: split_words(left),
                        slot,
                    });
                }
                Section::Auxiliary => {
                    let (d, q) = (split_words(left), split_words(right));
                    if d == q {
                        return Err(LexiconError::SelfMap {
                            line,
                            word: left.to_string(),
                        });
                    }
                    lex.auxiliary_table.push(AuxPattern {
                        declarative: d,
                        interrogative: q,
                    });
                }
            }
        }
        if lex.is_empty() {
            return Err(LexiconError::Empty);
        }
        Ok(lex)
    }

    pub fn is_empty(&self) -> bool {
        self.substitutions.is_empty()
            && self.addable_phrases.is_empty()
            && self.auxiliary_table.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }

    pub fn entry_count(&self) -> usize {
        self.substitutions.len() + self.addable_phrases.len() + self.auxiliary_table.len()
    }
}

/// The bundled starter lexicon.
pub fn default_lexicon() -> &'static Lexicon {
    static LEX: std::sync::OnceLock<Lexicon> = std::sync::OnceLock::new();
    LEX.get_or_init(|| Lexicon::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid"))
}
