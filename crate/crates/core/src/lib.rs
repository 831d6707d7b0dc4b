//! Corpus engineering for variation-set curricula.
//!
//! The pipeline reads CHAT transcripts ([`chat`]), measures naturally
//! occurring variation sets ([`detect`]), synthesizes new ones with seeded
//! rules ([`synth`]), mixes them into word-budgeted datasets with matched
//! shuffled controls ([`compose`]), and turns each dataset into a batch
//! schedule for one of two presentation methods ([`schedule`]).
//! [`pipeline`] runs the whole grid from one config file.

pub mod chat;
pub mod compose;
pub mod detect;
pub mod digest;
pub mod jsonl;
pub mod lexicon;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod stats;
pub mod stopwords;
pub mod synth;
pub mod text;

pub use chat::{TierFilter, Transcript, Utterance};
pub use compose::{CompositionConfig, Condition, Dataset, Sequence, SequenceKind};
pub use detect::{DetectionConfig, Origin, SetMember, VariationSet};
pub use lexicon::Lexicon;
pub use schedule::{BatchSchedule, Method};
pub use synth::{EditKind, EditOp, SynthConfig};
