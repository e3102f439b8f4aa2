//! Reply likelihoods behind one interface.
//!
//! A [`Scorer`] returns the natural-log likelihood of a reply given an
//! ordered, role-tagged context. Two backends ship: the in-process
//! [`NGramModel`] and the HTTP [`RemoteScorer`] speaking the
//! `POST /v1/logprob` protocol.

pub mod ngram;
pub mod remote;

pub use ngram::{
    render_turn, train_ngram, ContextCache, NGramConfig, NGramModel, Vocabulary, BOS, EOS, ROLE_A,
    ROLE_B, UNK,
};
pub use remote::{RemoteConfig, RemoteScorer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Role;

/// Lower/upper clamp applied when mapping likelihoods into (0, 1).
pub const PROBABILITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("reply is empty after tokenization")]
    EmptyReply,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("model error: {0}")]
    Model(String),
}

impl ScoreError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ScoreError::Transport(_))
    }
}

/// A role-tagged piece of text, as sent on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRequest {
    /// Oldest first; may be empty.
    pub context: Vec<Turn>,
    pub reply: Turn,
}

impl ScoreRequest {
    pub fn new(context: Vec<Turn>, reply: Turn) -> Self {
        ScoreRequest { context, reply }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbResult {
    /// Natural log.
    pub total_logprob: f64,
    /// Tokens scored in the reply, end-of-utterance included.
    pub token_count: u32,
}

/// Something that assigns sequence log-likelihoods to replies.
pub trait Scorer: Send + Sync {
    /// Identifies the model; used as part of cache keys and run manifests.
    fn model_id(&self) -> String;

    fn sequence_logprob(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn model_id(&self) -> String {
        (**self).model_id()
    }

    fn sequence_logprob(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError> {
        (**self).sequence_logprob(req)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }

    fn sequence_logprob(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError> {
        (**self).sequence_logprob(req)
    }
}

/// Per-token geometric mean likelihood, clamped to `[ε, 1 − ε]`.
pub fn reply_probability(lp: &LogProbResult) -> f64 {
    let tokens = lp.token_count.max(1) as f64;
    (lp.total_logprob / tokens)
        .exp()
        .clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Wraps a scorer and hides the context from it. Every measure computed
/// with this adapter is zero; it serves as the context-blind baseline.
#[derive(Debug, Clone)]
pub struct ContextFree<S>(pub S);

impl<S: Scorer> Scorer for ContextFree<S> {
    fn model_id(&self) -> String {
        format!("context-free({})", self.0.model_id())
    }

    fn sequence_logprob(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError> {
        self.0.sequence_logprob(&ScoreRequest::new(Vec::new(), req.reply.clone()))
    }
}
