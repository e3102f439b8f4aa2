//! Burst-based session segmentation.
//!
//! A conversation is cut before every utterance whose reply time (gap to
//! the immediately preceding utterance, either role) is strictly greater
//! than `n_multiplier` times the median reply time of the whole
//! conversation. Each burst is then cleaned (automated messages removed,
//! same-role runs merged) and kept only if it still looks like a real
//! exchange.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    filter_automated, merge_utterances, AutomatedFilter, Conversation, Corpus, Role, Utterance,
};
use crate::tokenize::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("conversation {0}: median reply time needs at least 2 utterances")]
    UndefinedMedian(String),
    #[error("invalid segmentation config: {0}")]
    Config(String),
}

/// Where same-role runs are merged into single turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeScope {
    /// Split on gaps first, then merge inside each burst. A long pause
    /// between two messages of the same speaker therefore still splits.
    WithinBurst,
    /// Merge over the whole conversation, then split the merged turns.
    WholeConversation,
}

#[derive(Debug, Clone)]
pub struct SegmentationConfig {
    pub n_multiplier: f64,
    pub min_turns: usize,
    pub merge_scope: MergeScope,
    /// Drop bursts in which any message carries meta `video=true`.
    pub drop_video_bursts: bool,
    pub automated: AutomatedFilter,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            n_multiplier: 100.0,
            min_turns: 4,
            merge_scope: MergeScope::WithinBurst,
            drop_video_bursts: false,
            automated: AutomatedFilter::default(),
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if !(self.n_multiplier > 0.0) || !self.n_multiplier.is_finite() {
            return Err(SegmentationError::Config(format!(
                "n_multiplier must be positive and finite, got {}",
                self.n_multiplier
            )));
        }
        if self.min_turns < 2 {
            return Err(SegmentationError::Config(format!(
                "min_turns must be at least 2, got {}",
                self.min_turns
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCovariates {
    pub turn_count: usize,
    pub token_count_total: usize,
    pub median_token_count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub conversation_id: String,
    pub session_index: usize,
    /// Strictly alternating roles.
    pub utterances: Vec<Utterance>,
    pub covariates: SessionCovariates,
}

impl Session {
    /// Builds a session and computes its covariates. Callers are responsible
    /// for the alternation invariant.
    pub fn new(conversation_id: impl Into<String>, session_index: usize, utterances: Vec<Utterance>) -> Self {
        let mut counts: Vec<usize> = utterances.iter().map(|u| tokenize(&u.text).len()).collect();
        let token_count_total = counts.iter().sum();
        counts.sort_unstable();
        let median_token_count = median_sorted(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
            .unwrap_or(0.0);
        Session {
            conversation_id: conversation_id.into(),
            session_index,
            covariates: SessionCovariates {
                turn_count: utterances.len(),
                token_count_total,
                median_token_count,
            },
            utterances,
        }
    }

    pub fn role_count(&self, role: Role) -> usize {
        self.utterances.iter().filter(|u| u.role == role).count()
    }

    pub fn is_alternating(&self) -> bool {
        self.utterances.windows(2).all(|w| w[0].role != w[1].role)
    }
}

/// Median of an already sorted slice; even lengths average the two middle
/// values.
pub(crate) fn median_sorted(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}

/// Median gap in seconds between consecutive utterances of the whole
/// conversation, regardless of role.
pub fn median_reply_time(conv: &Conversation) -> Result<f64, SegmentationError> {
    if conv.utterances.len() < 2 {
        return Err(SegmentationError::UndefinedMedian(conv.id.clone()));
    }
    let mut deltas: Vec<f64> = conv
        .utterances
        .windows(2)
        .map(|w| (w[1].timestamp - w[0].timestamp) as f64)
        .collect();
    deltas.sort_by(f64::total_cmp);
    Ok(median_sorted(&deltas).expect("non-empty"))
}

fn split_on_gaps(utterances: &[Utterance], threshold: f64) -> Vec<&[Utterance]> {
    let mut bursts = Vec::new();
    let mut start = 0;
    for i in 1..utterances.len() {
        let gap = (utterances[i].timestamp - utterances[i - 1].timestamp) as f64;
        if gap > threshold {
            bursts.push(&utterances[start..i]);
            start = i;
        }
    }
    if start < utterances.len() {
        bursts.push(&utterances[start..]);
    }
    bursts
}

fn burst_is_session(turns: &[Utterance], cfg: &SegmentationConfig) -> bool {
    let a = turns.iter().filter(|u| u.role == Role::A).count();
    let b = turns.len() - a;
    turns.len() >= cfg.min_turns && a >= 2 && b >= 2
}

/// Splits one conversation into valid sessions, numbered in time order.
pub fn split_sessions(
    conv: &Conversation,
    cfg: &SegmentationConfig,
) -> Result<Vec<Session>, SegmentationError> {
    cfg.validate()?;
    let threshold = cfg.n_multiplier * median_reply_time(conv)?;
    let video = |burst: &[Utterance]| cfg.drop_video_bursts && burst.iter().any(|u| u.meta_flag("video"));

    let turns_per_burst: Vec<Vec<Utterance>> = match cfg.merge_scope {
        MergeScope::WithinBurst => split_on_gaps(&conv.utterances, threshold)
            .into_iter()
            .filter(|burst| !video(burst))
            .map(|burst| {
                let kept: Vec<Utterance> = burst
                    .iter()
                    .filter(|u| !cfg.automated.is_automated(&u.text))
                    .cloned()
                    .collect();
                merge_utterances(&kept)
            })
            .collect(),
        MergeScope::WholeConversation => {
            let cleaned = filter_automated(conv, &cfg.automated);
            let merged = merge_utterances(&cleaned.utterances);
            split_on_gaps(&merged, threshold)
                .into_iter()
                .filter(|burst| !video(burst))
                .map(<[Utterance]>::to_vec)
                .collect()
        }
    };

    Ok(turns_per_burst
        .into_iter()
        .filter(|turns| burst_is_session(turns, cfg))
        .enumerate()
        .map(|(idx, turns)| Session::new(conv.id.clone(), idx, turns))
        .collect())
}

/// Sessions of one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationSessions {
    pub conversation_id: String,
    pub sessions: Vec<Session>,
}

/// Segments every conversation in parallel; output follows corpus order.
pub fn segment_corpus(
    corpus: &Corpus,
    cfg: &SegmentationConfig,
) -> Result<Vec<ConversationSessions>, SegmentationError> {
    cfg.validate()?;
    corpus
        .conversations
        .par_iter()
        .map(|c| {
            Ok(ConversationSessions {
                conversation_id: c.id.clone(),
                sessions: split_sessions(c, cfg)?,
            })
        })
        .collect()
}

/// One line of the sessions manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifestEntry {
    pub conversation_id: String,
    pub session_index: usize,
    pub utterance_ids: Vec<String>,
}

impl From<&Session> for SessionManifestEntry {
    fn from(s: &Session) -> Self {
        SessionManifestEntry {
            conversation_id: s.conversation_id.clone(),
            session_index: s.session_index,
            utterance_ids: s.utterances.iter().map(|u| u.id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSweepRow {
    pub n: f64,
    pub mean_sessions: f64,
    pub median_sessions: f64,
    pub stdev_sessions: f64,
}

/// Session-count statistics across conversations for each multiplier.
///
/// Larger multipliers merge bursts, so the session count usually falls as
/// `n` grows; it is not strictly guaranteed, since two bursts too short to
/// count on their own can merge into one that passes the turn filter.
pub fn n_sweep(
    corpus: &Corpus,
    n_values: &[f64],
    base: &SegmentationConfig,
) -> Result<Vec<NSweepRow>, SegmentationError> {
    if n_values.is_empty() {
        return Err(SegmentationError::Config("n_values must be non-empty".into()));
    }
    n_values
        .iter()
        .map(|&n| {
            let cfg = SegmentationConfig {
                n_multiplier: n,
                ..base.clone()
            };
            let mut counts: Vec<f64> = segment_corpus(corpus, &cfg)?
                .iter()
                .map(|c| c.sessions.len() as f64)
                .collect();
            counts.sort_by(f64::total_cmp);
            let k = counts.len() as f64;
            let mean = if counts.is_empty() { 0.0 } else { counts.iter().sum::<f64>() / k };
            let stdev = if counts.len() < 2 {
                0.0
            } else {
                (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            };
            Ok(NSweepRow {
                n,
                mean_sessions: mean,
                median_sessions: median_sorted(&counts).unwrap_or(0.0),
                stdev_sessions: stdev,
            })
        })
        .collect()
}
