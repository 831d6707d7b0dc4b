//! Fixture generators shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use varset::compose::{CompositionConfig, Condition, Dataset, Sequence};
use varset::schedule::BatchSchedule;
use varset::Utterance;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A made-up three-syllable word, distinct for every `n < 70^3`.
pub fn pseudo_word(mut n: usize) -> String {
    let mut s = String::with_capacity(6);
    for _ in 0..3 {
        let syl = n % 70;
        n /= 70;
        s.push(CONSONANTS[syl / 5] as char);
        s.push(VOWELS[syl % 5] as char);
    }
    s
}

const FILLER_VERBS: &[&str] = &[
    "take", "see", "push", "pull", "wash", "hold", "find", "bring", "hide", "drop",
];

/// Filler line `i`: a real verb plus three made-up nouns that no other line
/// uses, so no two lines share more than the verb.
pub fn filler_text(i: usize, salt: usize) -> String {
    let base = (salt * 100_000 + i) * 3;
    format!(
        "{} the {} {} with the {}.",
        FILLER_VERBS[i % FILLER_VERBS.len()],
        pseudo_word(base),
        pseudo_word(base + 1),
        pseudo_word(base + 2)
    )
}

pub fn unrelated_filler(n: usize, salt: usize) -> Vec<Utterance> {
    (0..n)
        .map(|i| Utterance::new(filler_text(i, salt), "MOT", "filler.cha", i as u32 + 1))
        .collect()
}

const NOUNS: &[&str] = &[
    "dog", "cat", "ball", "truck", "cup", "bottle", "cookie", "book", "hat", "shoes", "teddy",
    "duck", "train", "blanket", "bunny", "horse", "box", "chair", "juice", "car",
];
const ADJS: &[&str] = &[
    "big", "little", "red", "soft", "funny", "wet", "dirty", "new", "happy", "yummy",
];
const VERBS: &[&str] = &[
    "find", "get", "hold", "wash", "push", "throw", "catch", "fix", "open", "hide", "carry", "kick",
];
const NAMES: &[&str] = &[
    "Laura", "Adam", "Mommy", "Daddy", "Eve", "Sarah", "Nina", "Peter",
];
const PLACES: &[&str] = &[
    "in the box",
    "on the table",
    "in the bag",
    "on the chair",
    "in the bath",
];
const TIMES: &[&str] = &["last night", "yesterday", "today", "this morning"];

/// Child-directed-speech-like utterance built from a handful of templates.
pub fn cds_utterance(rng: &mut ChaCha8Rng) -> String {
    let n = NOUNS[rng.random_range(0..NOUNS.len())];
    let n2 = NOUNS[rng.random_range(0..NOUNS.len())];
    let a = ADJS[rng.random_range(0..ADJS.len())];
    let v = VERBS[rng.random_range(0..VERBS.len())];
    let name = NAMES[rng.random_range(0..NAMES.len())];
    let place = PLACES[rng.random_range(0..PLACES.len())];
    let time = TIMES[rng.random_range(0..TIMES.len())];
    match rng.random_range(0..14) {
        0 => format!("Do you want the {n}?"),
        1 => format!("You can put the {n} {place}."),
        2 => format!("Look at the {a} {n}."),
        3 => format!("Where's the {a} {n}?"),
        4 => format!("Let's {v} the {n}."),
        5 => format!("Can you {v} the {n}?"),
        6 => format!("The {n} is {a}."),
        7 => format!("What did {name} do {time}?"),
        8 => format!("{name} wants to {v} the {n}."),
        9 => format!("It's a {a} {n}."),
        10 => format!("You wanna {v} the {n} and the {n2}?"),
        11 => format!("We need the {a} {n} now."),
        12 => format!("Give the {n} to {name}, please."),
        _ => format!("That's a {a} {n}, isn't it?"),
    }
}

pub fn cds_sources(n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Utterance::new(cds_utterance(&mut rng), "MOT", "cds.cha", i as u32 + 1))
        .collect()
}

/// Write a CHAT corpus of unrelated filler lines, spread over `files`
/// transcripts, until the kept (three words or more) text reaches
/// `words`. Lines carry some CHAT annotation, and short or child-tier lines
/// are mixed in; none of that survives ingest.
pub fn write_chat_corpus(dir: &Path, files: usize, words: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bodies = vec![String::new(); files];
    let (mut total, mut i) = (0usize, 0usize);
    while total < words {
        let f = i % files;
        let text = filler_text(i, 7);
        let n = text.split_whitespace().count();
        let (verb, rest) = text.split_once(' ').unwrap();
        let rest = rest.trim_end_matches('.');
        let line = match rng.random_range(0..6) {
            0 => format!("{verb} [/] {verb} {rest} ."),
            1 => format!("&-um {verb} {rest} ."),
            2 => format!("{verb} {rest} [?] ."),
            _ => format!("{verb} {rest} ."),
        };
        let spk = if rng.random_bool(0.2) { "FAT" } else { "MOT" };
        writeln!(bodies[f], "*{spk}:\t{line}").unwrap();
        if rng.random_bool(0.1) {
            writeln!(bodies[f], "%mor:\tv|{verb} det|the n|x .").unwrap();
        }
        if rng.random_bool(0.1) {
            writeln!(bodies[f], "*CHI:\t{verb} it .").unwrap();
        }
        if rng.random_bool(0.05) {
            writeln!(bodies[f], "*MOT:\tuh oh .").unwrap();
        }
        total += n;
        i += 1;
    }
    std::fs::create_dir_all(dir).unwrap();
    for (f, body) in bodies.iter().enumerate() {
        let mut s = String::from("@UTF8\n@Begin\n@Languages:\teng\n@Participants:\tCHI Target_Child, MOT Mother, FAT Father\n");
        s.push_str(body);
        s.push_str("@End\n");
        std::fs::write(dir.join(format!("t{f:03}.cha")), s).unwrap();
    }
    total
}

/// The straw exchange with its intervening "Uh oh.".
pub const STRAW_CHAT: &str =
    "@UTF8\n@Begin\n@Languages:\teng\n@Participants:\tCHI Target_Child, MOT Mother\n\
*MOT:\tyou wanna straw ?\n\
*MOT:\there's your straw .\n\
*CHI:\tstraw .\n\
*MOT:\tuh oh .\n\
*MOT:\twhere's the straw ?\n\
@End\n";

/// Stopwords read straight from the bundled list, for oracles that must not
/// reuse the library's tokenizer.
pub fn stopword_oracle() -> HashSet<String> {
    include_str!("../../data/stopwords.txt")
        .lines()
        .map(|l| l.split('#').next().unwrap().trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Content words: lowercased tokens with edge punctuation removed, minus stopwords.
pub fn content_oracle(text: &str, stop: &HashSet<String>) -> HashSet<String> {
    text.split(' ')
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase()
        })
        .filter(|t| !t.is_empty() && !stop.contains(t))
        .collect()
}

/// Consecutive dataset from a layout: 0 is a filler line, `L > 0` a set of L members.
pub fn layout_dataset(layout: &[usize]) -> Dataset {
    let mut seqs = Vec::new();
    let mut v = 0u32;
    for (k, &len) in layout.iter().enumerate() {
        if len == 0 {
            seqs.push(Sequence::filler(format!("filler line {k}.")));
        } else {
            for j in 0..len {
                seqs.push(Sequence::member(
                    format!("set {v} member {j}."),
                    v,
                    j as u32,
                ));
            }
            v += 1;
        }
    }
    Dataset::new(
        seqs,
        CompositionConfig::new(0, 1, 0, Condition::Consecutive),
        None,
    )
}

/// Independent constraint check by exhaustive scanning. Returns the problems found.
pub fn brute_force_check(d: &Dataset, s: &BatchSchedule) -> Vec<String> {
    let mut problems = Vec::new();
    let find = |id: usize| -> Vec<usize> {
        let mut hits = Vec::new();
        for (b, batch) in s.batches.iter().enumerate() {
            for slot in &batch.slots {
                if slot.sequence_id == id {
                    hits.push(b);
                }
            }
        }
        hits
    };
    let mut batch_of = vec![0usize; d.sequences.len()];
    for (id, slot) in batch_of.iter_mut().enumerate() {
        let hits = find(id);
        if hits.len() != 1 {
            problems.push(format!("sequence {id} placed {} times", hits.len()));
        } else {
            *slot = hits[0];
        }
    }
    let placed: usize = s.batches.iter().map(|b| b.slots.len()).sum();
    if placed != d.sequences.len() {
        problems.push(format!(
            "{placed} slots for {} sequences",
            d.sequences.len()
        ));
    }
    for (b, batch) in s.batches.iter().enumerate() {
        if batch.slots.is_empty() || batch.slots.len() > s.batch_size {
            problems.push(format!("batch {b} has {} slots", batch.slots.len()));
        }
    }
    for (x, sx) in d.sequences.iter().enumerate() {
        for (y, sy) in d.sequences.iter().enumerate() {
            if let (Some(vx), Some(vy), Some(mx), Some(my)) =
                (sx.vs_id, sy.vs_id, sx.member_index, sy.member_index)
            {
                if vx == vy && my == mx + 1 && batch_of[y] != batch_of[x] + 1 {
                    problems.push(format!(
                        "vs {vx}: member {my} not in the batch after member {mx}"
                    ));
                }
            }
        }
    }
    let last = s.batches.len().saturating_sub(1);
    for t in 0..last {
        if s.batches[t].slots.len() < s.batch_size {
            for later in &s.batches[t + 1..] {
                for slot in &later.slots {
                    if d.sequences[slot.sequence_id].member_index.unwrap_or(0) == 0 {
                        problems.push(format!(
                            "batch {t} is partial but sequence {} comes later",
                            slot.sequence_id
                        ));
                    }
                }
            }
        }
    }
    problems
}
