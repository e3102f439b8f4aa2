//! Utterance-level measures over adjacency windows.
//!
//! For a focal utterance at position `k` of a session the window is
//! `(prev_other, prev_self, focal, reply)` = positions `k-2 … k+1`, where
//! `prev_other` and `focal` share a speaker. Redirection compares the
//! reply's likelihood after the real focal utterance with its likelihood
//! had the speaker simply repeated `prev_other`:
//!
//! ```text
//! p = P(reply | prev_self, focal)
//! q = P(reply | prev_self, prev_other)
//! R = logit(p) - logit(q)
//! ```
//!
//! Utterances at positions 0 and 1 (no `prev_other`) and the last utterance
//! (no reply) are not scored.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Role, Utterance};
use crate::scorer::{logit, reply_probability, ScoreError, ScoreRequest, Scorer, Turn};
use crate::segmentation::{ConversationSessions, Session};
use crate::tokenize::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("invalid adjacency window: {0}")]
    InvalidWindow(String),
    #[error("conversation {0}: need at least 2 scored utterances")]
    NotEnoughScored(String),
    #[error("orientation file {path}: {message}")]
    Orientation { path: String, message: String },
}

#[derive(Debug, Clone, Copy)]
pub struct AdjacencyWindow<'a> {
    pub prev_other: &'a Utterance,
    pub prev_self: &'a Utterance,
    pub focal: &'a Utterance,
    pub reply: &'a Utterance,
}

impl<'a> AdjacencyWindow<'a> {
    pub fn new(
        prev_other: &'a Utterance,
        prev_self: &'a Utterance,
        focal: &'a Utterance,
        reply: &'a Utterance,
    ) -> Result<Self, MeasureError> {
        if prev_other.role != focal.role || prev_self.role != reply.role || focal.role == reply.role {
            return Err(MeasureError::InvalidWindow(format!(
                "roles {} {} {} {} do not alternate",
                prev_other.role, prev_self.role, focal.role, reply.role
            )));
        }
        Ok(AdjacencyWindow {
            prev_other,
            prev_self,
            focal,
            reply,
        })
    }

    fn turn(u: &Utterance) -> Turn {
        Turn::new(u.role, u.text.clone())
    }

    /// Context for `p`: the reply speaker's last turn, then the focal one.
    pub fn actual_request(&self) -> ScoreRequest {
        ScoreRequest::new(
            vec![Self::turn(self.prev_self), Self::turn(self.focal)],
            Self::turn(self.reply),
        )
    }

    /// Context for `q`: the focal speaker repeats `prev_other`.
    pub fn repeated_request(&self) -> ScoreRequest {
        ScoreRequest::new(
            vec![Self::turn(self.prev_self), Self::turn(self.prev_other)],
            Self::turn(self.reply),
        )
    }
}

/// Windows of a session, one per scorable focal position.
pub fn session_windows(session: &Session) -> Vec<(usize, AdjacencyWindow<'_>)> {
    let u = &session.utterances;
    (2..u.len().saturating_sub(1))
        .filter_map(|k| {
            AdjacencyWindow::new(&u[k - 2], &u[k - 1], &u[k], &u[k + 1])
                .ok()
                .map(|w| (k, w))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub role: Role,
    pub p_likelihood: f64,
    pub q_likelihood: f64,
    pub redirection: f64,
    pub similarity_difference: Option<f64>,
    pub dependence: Option<f64>,
}

pub fn redirection_score<S: Scorer + ?Sized>(
    win: &AdjacencyWindow<'_>,
    scorer: &S,
) -> Result<UtteranceScore, ScoreError> {
    let p = reply_probability(&scorer.sequence_logprob(&win.actual_request())?);
    let q = reply_probability(&scorer.sequence_logprob(&win.repeated_request())?);
    Ok(UtteranceScore {
        utterance_id: win.focal.id.clone(),
        role: win.focal.role,
        p_likelihood: p,
        q_likelihood: q,
        redirection: logit(p) - logit(q),
        similarity_difference: None,
        dependence: None,
    })
}

/// `logit P(reply | focal) − logit P(reply | nothing)`: how much more likely
/// the reply is once the focal utterance is known.
pub fn dependence_score<S: Scorer + ?Sized>(
    win: &AdjacencyWindow<'_>,
    scorer: &S,
) -> Result<f64, ScoreError> {
    let reply = Turn::new(win.reply.role, win.reply.text.clone());
    let given = scorer.sequence_logprob(&ScoreRequest::new(
        vec![Turn::new(win.focal.role, win.focal.text.clone())],
        reply.clone(),
    ))?;
    let marginal = scorer.sequence_logprob(&ScoreRequest::new(Vec::new(), reply))?;
    Ok(logit(reply_probability(&given)) - logit(reply_probability(&marginal)))
}

/// Text similarity in `[-1, 1]`; `None` when either side has no tokens.
pub trait Embedder: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> Option<f64>;
}

/// TF-IDF vectors with smoothed idf `ln((1+N)/(1+df)) + 1`, compared by
/// cosine.
#[derive(Debug, Clone, Default)]
pub struct TfIdf {
    documents: usize,
    document_frequency: HashMap<String, usize>,
}

impl TfIdf {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0;
        for text in texts {
            n += 1;
            let mut terms = tokenize(text);
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        TfIdf {
            documents: n,
            document_frequency: df,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.document_frequency.get(term).copied().unwrap_or(0) as f64;
        ((1.0 + self.documents as f64) / (1.0 + df)).ln() + 1.0
    }

    /// L2-normalized sparse vector, sorted by term; `None` if no tokens.
    pub fn vector(&self, text: &str) -> Option<Vec<(String, f64)>> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        if tf.is_empty() {
            return None;
        }
        let mut v: Vec<(String, f64)> = tf
            .into_iter()
            .map(|(t, c)| {
                let w = c * self.idf(&t);
                (t, w)
            })
            .collect();
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        for (_, w) in &mut v {
            *w /= norm;
        }
        Some(v)
    }
}

fn sparse_dot(a: &[(String, f64)], b: &[(String, f64)]) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    dot
}

impl Embedder for TfIdf {
    fn similarity(&self, a: &str, b: &str) -> Option<f64> {
        Some(sparse_dot(&self.vector(a)?, &self.vector(b)?).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityDifference {
    pub value: f64,
    /// Set when a text had no tokens and its similarity was taken as 0.
    pub flagged: bool,
}

/// `sim(reply, focal) − sim(reply, prev_other)`.
pub fn similarity_difference<E: Embedder + ?Sized>(
    win: &AdjacencyWindow<'_>,
    embedder: &E,
) -> SimilarityDifference {
    let to_focal = embedder.similarity(&win.reply.text, &win.focal.text);
    let to_prev = embedder.similarity(&win.reply.text, &win.prev_other.text);
    SimilarityDifference {
        value: to_focal.unwrap_or(0.0) - to_prev.unwrap_or(0.0),
        flagged: to_focal.is_none() || to_prev.is_none(),
    }
}

/// Externally computed per-utterance orientation scores.
pub type OrientationScores = HashMap<String, f64>;

/// Reads a two-column CSV (`utterance_id,orientation`, header required).
pub fn load_orientation(path: &Path) -> Result<OrientationScores, MeasureError> {
    let err = |message: String| MeasureError::Orientation {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| err(e.to_string()))?;
        let (Some(id), Some(value)) = (row.get(0), row.get(1)) else {
            return Err(err(format!("row {}: expected 2 columns", i + 2)));
        };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| err(format!("row {}: bad number {value:?}", i + 2)))?;
        out.insert(id.to_string(), value);
    }
    Ok(out)
}

/// Which optional measures to compute next to redirection.
#[derive(Default, Clone, Copy)]
pub struct MeasureOptions<'a> {
    pub embedder: Option<&'a dyn Embedder>,
    pub dependence: bool,
    pub orientation: Option<&'a OrientationScores>,
}

/// One line of the scored-utterance output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub conversation_id: String,
    pub session_index: usize,
    pub position: usize,
    pub utterance_id: String,
    pub role: Role,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub redirection: Option<f64>,
    pub similarity_difference: Option<f64>,
    pub dependence: Option<f64>,
    pub orientation: Option<f64>,
    pub unscored_flag: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn score_window<S: Scorer + ?Sized>(
    session: &Session,
    position: usize,
    win: &AdjacencyWindow<'_>,
    scorer: &S,
    opts: MeasureOptions<'_>,
) -> ScoreRecord {
    let sim = opts.embedder.map(|e| similarity_difference(win, e).value);
    let orientation = opts.orientation.and_then(|o| o.get(&win.focal.id).copied());
    let mut record = ScoreRecord {
        conversation_id: session.conversation_id.clone(),
        session_index: session.session_index,
        position,
        utterance_id: win.focal.id.clone(),
        role: win.focal.role,
        p: None,
        q: None,
        redirection: None,
        similarity_difference: sim,
        dependence: None,
        orientation,
        unscored_flag: false,
        error: None,
    };
    match redirection_score(win, scorer) {
        Ok(score) => {
            record.p = Some(score.p_likelihood);
            record.q = Some(score.q_likelihood);
            record.redirection = Some(score.redirection);
        }
        Err(e) => {
            record.unscored_flag = true;
            record.error = Some(e.to_string());
            return record;
        }
    }
    if opts.dependence {
        match dependence_score(win, scorer) {
            Ok(d) => record.dependence = Some(d),
            Err(e) => record.error = Some(format!("dependence: {e}")),
        }
    }
    record
}

/// Scores every window of one session, in position order.
pub fn score_session<S: Scorer + ?Sized>(
    session: &Session,
    scorer: &S,
    opts: MeasureOptions<'_>,
) -> Vec<ScoreRecord> {
    session_windows(session)
        .into_iter()
        .map(|(k, w)| score_window(session, k, &w, scorer, opts))
        .collect()
}

/// Scores all sessions in parallel. Output order is conversation, session,
/// position, independent of thread scheduling.
pub fn score_corpus<S: Scorer + ?Sized>(
    conversations: &[ConversationSessions],
    scorer: &S,
    opts: MeasureOptions<'_>,
) -> Vec<ScoreRecord> {
    let jobs: Vec<(&Session, usize, AdjacencyWindow<'_>)> = conversations
        .iter()
        .flat_map(|c| &c.sessions)
        .flat_map(|s| session_windows(s).into_iter().map(move |(k, w)| (s, k, w)))
        .collect();
    jobs.par_iter()
        .map(|(s, k, w)| score_window(s, *k, w, scorer, opts))
        .collect()
}

/// Four-utterance excerpt ending in the reply to the selected utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excerpt {
    pub conversation_id: String,
    pub session_index: usize,
    pub focal_id: String,
    pub redirection: f64,
    pub utterance_ids: Vec<String>,
    pub roles: Vec<Role>,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremePair {
    pub high: Excerpt,
    pub low: Excerpt,
}

/// Excerpts around the highest- and lowest-redirection utterances of one
/// conversation. Ties go to the earliest position; the low excerpt is
/// chosen among the utterances other than the high one, so a conversation
/// with constant scores yields its two earliest positions.
pub fn extract_extreme_pairs(
    conv: &ConversationSessions,
    scores: &[ScoreRecord],
    window: usize,
) -> Result<ExtremePair, MeasureError> {
    let mut scored: Vec<(&ScoreRecord, f64)> = scores
        .iter()
        .filter(|r| r.conversation_id == conv.conversation_id)
        .filter_map(|r| r.redirection.map(|v| (r, v)))
        .collect();
    if scored.len() < 2 {
        return Err(MeasureError::NotEnoughScored(conv.conversation_id.clone()));
    }
    scored.sort_by_key(|(r, _)| (r.session_index, r.position));

    let mut hi = 0;
    for (i, (_, v)) in scored.iter().enumerate() {
        if *v > scored[hi].1 {
            hi = i;
        }
    }
    let mut lo = if hi == 0 { 1 } else { 0 };
    for (i, (_, v)) in scored.iter().enumerate() {
        if i != hi && *v < scored[lo].1 {
            lo = i;
        }
    }

    let excerpt = |record: &ScoreRecord, value: f64| -> Result<Excerpt, MeasureError> {
        let session = conv
            .sessions
            .iter()
            .find(|s| s.session_index == record.session_index)
            .ok_or_else(|| {
                MeasureError::InvalidWindow(format!("session {} missing", record.session_index))
            })?;
        let end = (record.position + 1).min(session.utterances.len() - 1);
        let start = (end + 1).saturating_sub(window.max(1));
        let slice = &session.utterances[start..=end];
        Ok(Excerpt {
            conversation_id: conv.conversation_id.clone(),
            session_index: record.session_index,
            focal_id: record.utterance_id.clone(),
            redirection: value,
            utterance_ids: slice.iter().map(|u| u.id.clone()).collect(),
            roles: slice.iter().map(|u| u.role).collect(),
            texts: slice.iter().map(|u| u.text.clone()).collect(),
        })
    };
    Ok(ExtremePair {
        high: excerpt(scored[hi].0, scored[hi].1)?,
        low: excerpt(scored[lo].0, scored[lo].1)?,
    })
}
