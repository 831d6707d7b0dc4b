//! Batch schedules for the two presentation methods.
//!
//! `sequential_concat` turns every variation set into one line (members
//! joined by a single space) and fills batches in dataset order.
//!
//! `adjacent_batch` places member `j` of a set in batch `b + j`. Batches are
//! built from `batch_size` lanes: a free lane takes the next dataset item,
//! either one filler line (one batch) or a whole set (one batch per member).
//! The last `batch_size * (longest set - 1)` filler lines are held back and
//! only handed out once everything else is placed, so lanes whose sets have
//! ended keep getting filler while longer sets finish. When the filler is
//! gone, tail batches can be partial; after the first such batch only
//! continuation members of already-started sets may follow.
//!
//! On a shuffled dataset both methods reduce to plain batching in dataset order.
//!
//! Wire format: a JSON header line, then one JSON line per batch.

use crate::compose::{Condition, Dataset, SequenceKind};
use crate::digest::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;

pub const SCHEDULE_FORMAT: &str = "vs-schedule";
pub const SCHEDULE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SequentialConcat,
    AdjacentBatch,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SequentialConcat => "sequential_concat",
            Method::AdjacentBatch => "adjacent_batch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequential_concat" => Ok(Method::SequentialConcat),
            "adjacent_batch" => Ok(Method::AdjacentBatch),
            other => Err(format!(
                "unknown method {other:?} (sequential_concat|adjacent_batch)"
            )),
        }
    }
}

/// Where one member sits inside a concatenated line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpan {
    pub sequence_id: usize,
    pub byte_start: usize,
    pub byte_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotRef {
    /// Dataset line index; for a concatenated line, its first member.
    pub sequence_id: usize,
    pub vs_id: Option<u32>,
    pub member_index: Option<u32>,
    /// Present only on concatenated set lines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<MemberSpan>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Batch {
    pub index: usize,
    pub slots: Vec<SlotRef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub method: Method,
    pub condition: Condition,
    pub batch_size: usize,
    pub batches: Vec<Batch>,
    pub dataset_digest: String,
}

impl BatchSchedule {
    pub fn slot_count(&self) -> usize {
        self.batches.iter().map(|b| b.slots.len()).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("batch_size must be at least 1")]
    BatchSize,
    #[error("schedule file: {0}")]
    Format(String),
    #[error("schedule file line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("schedule file is truncated: header promises {expected} batches, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dataset digest mismatch: schedule expects {expected}, dataset is {found}")]
    DigestMismatch { expected: String, found: String },
}

/// First structural problem found by [`verify_schedule`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("schedule method is {found}, expected {expected}")]
    MethodMismatch { expected: Method, found: Method },
    #[error("schedule was built for a {found:?} dataset, dataset is {expected:?}")]
    ConditionMismatch {
        expected: Condition,
        found: Condition,
    },
    #[error("dataset digest mismatch: schedule has {schedule}, dataset is {dataset}")]
    Digest { schedule: String, dataset: String },
    #[error("batch_size is 0")]
    ZeroBatchSize,
    #[error("batch {batch} has index {found}")]
    BatchIndex { batch: usize, found: usize },
    #[error("batch {batch} has {slots} slots, more than batch_size {batch_size}")]
    Oversized {
        batch: usize,
        slots: usize,
        batch_size: usize,
    },
    #[error("batch {batch} is empty")]
    Empty { batch: usize },
    #[error("batch {batch} is not full but is followed by placeable sequences")]
    NotFull { batch: usize },
    #[error("sequence {sequence_id} does not exist in the dataset")]
    UnknownSequence { sequence_id: usize },
    #[error("sequence {sequence_id} is scheduled more than once")]
    Duplicate { sequence_id: usize },
    #[error("sequence {sequence_id} is never scheduled")]
    Missing { sequence_id: usize },
    #[error("slot for sequence {sequence_id} carries metadata that disagrees with the dataset")]
    Metadata { sequence_id: usize },
    #[error("vs {vs_id}: concatenated line does not match its members")]
    BadConcat { vs_id: u32 },
    #[error("slots are not in dataset order at sequence {sequence_id}")]
    Order { sequence_id: usize },
    #[error("vs {vs_id}: member {member_index} is in batch {found}, expected batch {expected}")]
    NotAdjacent {
        vs_id: u32,
        member_index: u32,
        expected: usize,
        found: usize,
    },
}

fn plain_slot(d: &Dataset, i: usize) -> SlotRef {
    let s = &d.sequences[i];
    SlotRef {
        sequence_id: i,
        vs_id: s.vs_id,
        member_index: s.member_index,
        members: None,
    }
}

fn chunk(batch_size: usize, slots: Vec<SlotRef>) -> Vec<Batch> {
    let mut batches = Vec::with_capacity(slots.len().div_ceil(batch_size));
    let mut it = slots.into_iter().peekable();
    while it.peek().is_some() {
        let slots: Vec<SlotRef> = it.by_ref().take(batch_size).collect();
        batches.push(Batch {
            index: batches.len(),
            slots,
        });
    }
    batches
}

fn schedule(d: &Dataset, batch_size: usize, method: Method, batches: Vec<Batch>) -> BatchSchedule {
    BatchSchedule {
        method,
        condition: d.config.condition,
        batch_size,
        batches,
        dataset_digest: d.manifest_hash.clone(),
    }
}

/// Member spans of a concatenated set line, with the byte offsets of each
/// member inside `text` joined by single spaces.
pub fn concat_spans(d: &Dataset, members: &[usize]) -> (String, Vec<MemberSpan>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(members.len());
    for &m in members {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(&d.sequences[m].text);
        spans.push(MemberSpan {
            sequence_id: m,
            byte_start: start,
            byte_end: text.len(),
        });
    }
    (text, spans)
}

pub fn schedule_sequential_concat(
    d: &Dataset,
    batch_size: usize,
) -> Result<BatchSchedule, ScheduleError> {
    if batch_size == 0 {
        return Err(ScheduleError::BatchSize);
    }
    let slots = if d.config.condition == Condition::Shuffled {
        (0..d.sequences.len()).map(|i| plain_slot(d, i)).collect()
    } else {
        let by_vs = d.members_by_vs();
        let mut slots = Vec::new();
        for (i, s) in d.sequences.iter().enumerate() {
            match (s.vs_id, s.member_index) {
                (Some(v), Some(0)) => {
                    let (_, spans) = concat_spans(d, &by_vs[v as usize]);
                    slots.push(SlotRef {
                        sequence_id: i,
                        vs_id: Some(v),
                        member_index: None,
                        members: Some(spans),
                    });
                }
                (Some(_), _) => {}
                _ => slots.push(plain_slot(d, i)),
            }
        }
        slots
    };
    Ok(schedule(
        d,
        batch_size,
        Method::SequentialConcat,
        chunk(batch_size, slots),
    ))
}

pub fn schedule_adjacent_batch(
    d: &Dataset,
    batch_size: usize,
) -> Result<BatchSchedule, ScheduleError> {
    if batch_size == 0 {
        return Err(ScheduleError::BatchSize);
    }
    if d.config.condition == Condition::Shuffled {
        let slots = (0..d.sequences.len()).map(|i| plain_slot(d, i)).collect();
        return Ok(schedule(
            d,
            batch_size,
            Method::AdjacentBatch,
            chunk(batch_size, slots),
        ));
    }

    // queue items are runs of dataset indices: one filler or one whole set
    let by_vs = d.members_by_vs();
    let mut items: Vec<Vec<usize>> = Vec::new();
    for (i, s) in d.sequences.iter().enumerate() {
        match (s.kind, s.vs_id, s.member_index) {
            (SequenceKind::VsMember, Some(v), Some(0)) => items.push(by_vs[v as usize].clone()),
            (SequenceKind::VsMember, _, _) => {}
            _ => items.push(vec![i]),
        }
    }
    let longest = by_vs.iter().map(Vec::len).max().unwrap_or(1);
    let reserve_len = batch_size * longest.saturating_sub(1);

    let filler_positions: Vec<usize> = (0..items.len())
        .filter(|&k| items[k].len() == 1 && d.sequences[items[k][0]].kind == SequenceKind::Filler)
        .collect();
    let held: Vec<usize> =
        filler_positions[filler_positions.len().saturating_sub(reserve_len)..].to_vec();
    let mut is_held = vec![false; items.len()];
    for &k in &held {
        is_held[k] = true;
    }
    let mut main: VecDeque<usize> = (0..items.len()).filter(|&k| !is_held[k]).collect();
    let mut reserve: VecDeque<usize> = held.into();

    let mut lanes: Vec<Option<(usize, usize)>> = vec![None; batch_size];
    let mut batches = Vec::new();
    loop {
        for lane in lanes.iter_mut() {
            if lane.is_none() {
                *lane = main
                    .pop_front()
                    .or_else(|| reserve.pop_front())
                    .map(|k| (k, 0));
            }
        }
        if lanes.iter().all(Option::is_none) {
            break;
        }
        let mut slots = Vec::with_capacity(batch_size);
        for lane in lanes.iter_mut() {
            if let Some((k, j)) = *lane {
                slots.push(plain_slot(d, items[k][j]));
                *lane = (j + 1 < items[k].len()).then_some((k, j + 1));
            }
        }
        batches.push(Batch {
            index: batches.len(),
            slots,
        });
    }
    Ok(schedule(d, batch_size, Method::AdjacentBatch, batches))
}

pub fn build_schedule(
    d: &Dataset,
    batch_size: usize,
    method: Method,
) -> Result<BatchSchedule, ScheduleError> {
    match method {
        Method::SequentialConcat => schedule_sequential_concat(d, batch_size),
        Method::AdjacentBatch => schedule_adjacent_batch(d, batch_size),
    }
}

/// [`verify_schedule`], first checking that the schedule uses `method`.
pub fn verify_schedule_as(s: &BatchSchedule, d: &Dataset, method: Method) -> Result<(), Violation> {
    if s.method != method {
        return Err(Violation::MethodMismatch {
            expected: method,
            found: s.method,
        });
    }
    verify_schedule(s, d)
}

/// Check digest, batch indices and sizes, the partition, slot metadata,
/// ordering (where the method fixes it) and batch adjacency of set members.
pub fn verify_schedule(s: &BatchSchedule, d: &Dataset) -> Result<(), Violation> {
    if s.dataset_digest != d.manifest_hash {
        return Err(Violation::Digest {
            schedule: s.dataset_digest.clone(),
            dataset: d.manifest_hash.clone(),
        });
    }
    if s.condition != d.config.condition {
        return Err(Violation::ConditionMismatch {
            expected: d.config.condition,
            found: s.condition,
        });
    }
    if s.batch_size == 0 {
        return Err(Violation::ZeroBatchSize);
    }
    for (b, batch) in s.batches.iter().enumerate() {
        if batch.index != b {
            return Err(Violation::BatchIndex {
                batch: b,
                found: batch.index,
            });
        }
        if batch.slots.len() > s.batch_size {
            return Err(Violation::Oversized {
                batch: b,
                slots: batch.slots.len(),
                batch_size: s.batch_size,
            });
        }
        if batch.slots.is_empty() {
            return Err(Violation::Empty { batch: b });
        }
    }

    let n = d.sequences.len();
    let mut batch_of: Vec<Option<usize>> = vec![None; n];
    let mut place = |id: usize, b: usize| -> Result<(), Violation> {
        match batch_of.get_mut(id) {
            None => Err(Violation::UnknownSequence { sequence_id: id }),
            Some(Some(_)) => Err(Violation::Duplicate { sequence_id: id }),
            Some(slot) => {
                *slot = Some(b);
                Ok(())
            }
        }
    };
    let concat =
        s.method == Method::SequentialConcat && d.config.condition == Condition::Consecutive;
    let by_vs = d.members_by_vs();
    for (b, batch) in s.batches.iter().enumerate() {
        for slot in &batch.slots {
            let id = slot.sequence_id;
            let seq = d
                .sequences
                .get(id)
                .ok_or(Violation::UnknownSequence { sequence_id: id })?;
            if concat && seq.kind == SequenceKind::VsMember {
                let v = seq.vs_id.expect("checked dataset");
                let (_, expected) = concat_spans(d, &by_vs[v as usize]);
                if slot.vs_id != Some(v) || slot.member_index.is_some() {
                    return Err(Violation::Metadata { sequence_id: id });
                }
                if slot.members.as_ref() != Some(&expected) || expected[0].sequence_id != id {
                    return Err(Violation::BadConcat { vs_id: v });
                }
                for m in &expected {
                    place(m.sequence_id, b)?;
                }
            } else {
                if slot.vs_id != seq.vs_id
                    || slot.member_index != seq.member_index
                    || slot.members.is_some()
                {
                    return Err(Violation::Metadata { sequence_id: id });
                }
                place(id, b)?;
            }
        }
    }
    if let Some(id) = batch_of.iter().position(Option::is_none) {
        return Err(Violation::Missing { sequence_id: id });
    }
    let batch_of: Vec<usize> = batch_of.into_iter().map(Option::unwrap).collect();

    let lane_packed =
        s.method == Method::AdjacentBatch && d.config.condition == Condition::Consecutive;
    if lane_packed {
        for (v, members) in by_vs.iter().enumerate() {
            let b0 = batch_of[members[0]];
            for (j, &m) in members.iter().enumerate() {
                if batch_of[m] != b0 + j {
                    return Err(Violation::NotAdjacent {
                        vs_id: v as u32,
                        member_index: j as u32,
                        expected: b0 + j,
                        found: batch_of[m],
                    });
                }
            }
        }
        // a partial batch may only be followed by continuation members
        let last = s.batches.len().saturating_sub(1);
        if let Some(t) = s.batches[..last]
            .iter()
            .position(|b| b.slots.len() < s.batch_size)
        {
            let later_fresh = s.batches[t + 1..]
                .iter()
                .flat_map(|b| &b.slots)
                .any(|slot| slot.member_index.is_none_or(|m| m == 0));
            if later_fresh {
                return Err(Violation::NotFull { batch: t });
            }
        }
    } else {
        let mut prev = None;
        for slot in s.batches.iter().flat_map(|b| &b.slots) {
            if prev.is_some_and(|p| slot.sequence_id <= p) {
                return Err(Violation::Order {
                    sequence_id: slot.sequence_id,
                });
            }
            prev = Some(slot.sequence_id);
        }
        let last = s.batches.len().saturating_sub(1);
        if let Some(t) = s.batches[..last]
            .iter()
            .position(|b| b.slots.len() < s.batch_size)
        {
            return Err(Violation::NotFull { batch: t });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    method: Method,
    condition: Condition,
    batch_size: usize,
    dataset_digest: String,
    batch_count: usize,
    slot_count: usize,
}

pub fn serialize_schedule(s: &BatchSchedule) -> Vec<u8> {
    let header = Header {
        format: SCHEDULE_FORMAT.into(),
        version: SCHEDULE_VERSION,
        method: s.method,
        condition: s.condition,
        batch_size: s.batch_size,
        dataset_digest: s.dataset_digest.clone(),
        batch_count: s.batches.len(),
        slot_count: s.slot_count(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(crate::jsonl::to_jsonl_bytes(&s.batches));
    out
}

pub fn deserialize_schedule(bytes: &[u8]) -> Result<BatchSchedule, ScheduleError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ScheduleError::Format(e.to_string()))?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(ScheduleError::Format(
            "last line is not newline-terminated (truncated?)".into(),
        ));
    }
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| ScheduleError::Format("empty file".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|source| ScheduleError::Json { line: 1, source })?;
    if header.format != SCHEDULE_FORMAT || header.version != SCHEDULE_VERSION {
        return Err(ScheduleError::Format(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    let mut batches = Vec::with_capacity(header.batch_count);
    for (i, line) in lines {
        let b: Batch = serde_json::from_str(line).map_err(|source| ScheduleError::Json {
            line: i + 1,
            source,
        })?;
        batches.push(b);
    }
    if batches.len() != header.batch_count {
        return Err(ScheduleError::Truncated {
            expected: header.batch_count,
            found: batches.len(),
        });
    }
    let s = BatchSchedule {
        method: header.method,
        condition: header.condition,
        batch_size: header.batch_size,
        batches,
        dataset_digest: header.dataset_digest,
    };
    if s.slot_count() != header.slot_count {
        return Err(ScheduleError::Format(format!(
            "header promises {} slots, found {}",
            header.slot_count,
            s.slot_count()
        )));
    }
    Ok(s)
}

/// Deserialize a schedule and check it references exactly these dataset bytes.
pub fn load_schedule_checked(
    schedule_bytes: &[u8],
    dataset_bytes: &[u8],
) -> Result<BatchSchedule, ScheduleError> {
    let s = deserialize_schedule(schedule_bytes)?;
    let found = sha256_hex(dataset_bytes);
    if s.dataset_digest != found {
        return Err(ScheduleError::DigestMismatch {
            expected: s.dataset_digest,
            found,
        });
    }
    Ok(s)
}
