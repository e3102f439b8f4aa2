//! Measuring who steers a two-party conversation.
//!
//! Utterances are scored by how much more likely a reply becomes when the
//! language model sees the utterance it answers instead of the speaker's
//! own earlier turn. Scores are aggregated per session and role and fed
//! into paired and unpaired rank tests.

pub mod aggregate;
pub mod corpus;
pub mod fightin_words;
pub mod measures;
pub mod pipeline;
pub mod scorer;
pub mod seed;
pub mod segmentation;
pub mod stats;
pub mod synthetic;
pub mod tokenize;

pub use corpus::{Conversation, Corpus, Role, Utterance};
pub use scorer::{LogProbResult, ScoreError, ScoreRequest, Scorer, Turn};
pub use segmentation::{Session, SegmentationConfig};
