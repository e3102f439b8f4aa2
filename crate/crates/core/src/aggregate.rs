//! Session summaries, relative redirection, phase slices and cohorts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Outcome, Role};
use crate::measures::ScoreRecord;
use crate::segmentation::{ConversationSessions, Session};
use crate::seed::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which per-utterance value is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Redirection,
    SimilarityDifference,
    Dependence,
    Orientation,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Redirection,
        Metric::SimilarityDifference,
        Metric::Dependence,
        Metric::Orientation,
    ];

    pub fn value(self, r: &ScoreRecord) -> Option<f64> {
        if r.unscored_flag {
            return None;
        }
        match self {
            Metric::Redirection => r.redirection,
            Metric::SimilarityDifference => r.similarity_difference,
            Metric::Dependence => r.dependence,
            Metric::Orientation => r.orientation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Redirection => "redirection",
            Metric::SimilarityDifference => "similarity_difference",
            Metric::Dependence => "dependence",
            Metric::Orientation => "orientation",
        }
    }
}

/// Per-session, per-role aggregate of one metric.
///
/// `t_*` refers to role A, `c_*` to role B. Averages are `None` when the
/// role has no scored utterance in the session; such a summary is partial
/// and relative values are undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub conversation_id: String,
    pub session_index: usize,
    pub metric: Metric,
    pub t_avg: Option<f64>,
    pub c_avg: Option<f64>,
    pub t_rel: Option<f64>,
    pub c_rel: Option<f64>,
    pub n_scored_a: usize,
    pub n_scored_b: usize,
    pub turn_count: usize,
    pub token_count: usize,
}

impl SessionSummary {
    pub fn is_partial(&self) -> bool {
        self.t_avg.is_none() || self.c_avg.is_none()
    }

    pub fn get(&self, q: Quantity) -> Option<f64> {
        match q {
            Quantity::TAvg => self.t_avg,
            Quantity::CAvg => self.c_avg,
            Quantity::TRel => self.t_rel,
            Quantity::CRel => self.c_rel,
        }
    }
}

/// `(exp t / (exp t + exp c), exp c / (exp t + exp c))`, computed after
/// subtracting the larger argument.
pub fn relative_redirection(t_avg: f64, c_avg: f64) -> (f64, f64) {
    let m = t_avg.max(c_avg);
    let et = (t_avg - m).exp();
    let ec = (c_avg - m).exp();
    let z = et + ec;
    (et / z, ec / z)
}

/// Averages one metric per role over the scored utterances of a session.
/// `scores` may contain records from other sessions; they are ignored.
pub fn session_averages(scores: &[ScoreRecord], session: &Session, metric: Metric) -> SessionSummary {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for r in scores
        .iter()
        .filter(|r| r.conversation_id == session.conversation_id && r.session_index == session.session_index)
    {
        if let Some(v) = metric.value(r) {
            let slot = match r.role {
                Role::A => 0,
                Role::B => 1,
            };
            sums[slot] += v;
            counts[slot] += 1;
        }
    }
    let avg = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
    let (t_avg, c_avg) = (avg(0), avg(1));
    let (t_rel, c_rel) = match (t_avg, c_avg) {
        (Some(t), Some(c)) => {
            let (tr, cr) = relative_redirection(t, c);
            (Some(tr), Some(cr))
        }
        _ => (None, None),
    };
    SessionSummary {
        conversation_id: session.conversation_id.clone(),
        session_index: session.session_index,
        metric,
        t_avg,
        c_avg,
        t_rel,
        c_rel,
        n_scored_a: counts[0],
        n_scored_b: counts[1],
        turn_count: session.covariates.turn_count,
        token_count: session.covariates.token_count_total,
    }
}

/// Summaries for every session, in conversation then session order.
pub fn summarize(
    conversations: &[ConversationSessions],
    scores: &[ScoreRecord],
    metric: Metric,
) -> Vec<SessionSummary> {
    let mut by_session: BTreeMap<(&str, usize), Vec<ScoreRecord>> = BTreeMap::new();
    for r in scores {
        by_session
            .entry((r.conversation_id.as_str(), r.session_index))
            .or_default()
            .push(r.clone());
    }
    let mut convs: Vec<&ConversationSessions> = conversations.iter().collect();
    convs.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
    let empty = Vec::new();
    convs
        .into_iter()
        .flat_map(|c| &c.sessions)
        .map(|s| {
            let recs = by_session
                .get(&(s.conversation_id.as_str(), s.session_index))
                .unwrap_or(&empty);
            session_averages(recs, s, metric)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    TAvg,
    CAvg,
    TRel,
    CRel,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::TAvg, Quantity::CAvg, Quantity::TRel, Quantity::CRel];

    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::TAvg => "t_avg",
            Quantity::CAvg => "c_avg",
            Quantity::TRel => "t_rel",
            Quantity::CRel => "c_rel",
        }
    }
}

/// Means over the first and last `k` sessions of one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub conversation_id: String,
    pub n_sessions: usize,
    /// `(first_k_mean, last_k_mean)` per quantity; `None` when no session
    /// in the window defines the quantity.
    pub values: BTreeMap<Quantity, (Option<f64>, Option<f64>)>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Phase table over conversations with at least `min_sessions` sessions.
/// `summaries` must be ordered by conversation then session, as produced by
/// [`summarize`].
pub fn phase_slices(
    summaries: &[SessionSummary],
    k: usize,
    min_sessions: usize,
) -> Result<Vec<PhaseRow>, AggregateError> {
    if k == 0 {
        return Err(AggregateError::Config("k must be at least 1".into()));
    }
    if min_sessions < 2 * k {
        return Err(AggregateError::Config(format!(
            "min_sessions ({min_sessions}) must be at least 2k ({})",
            2 * k
        )));
    }
    let mut rows = Vec::new();
    for group in summaries.chunk_by(|a, b| a.conversation_id == b.conversation_id) {
        if group.len() < min_sessions {
            continue;
        }
        let first = &group[..k];
        let last = &group[group.len() - k..];
        let values = Quantity::ALL
            .iter()
            .map(|&q| {
                (
                    q,
                    (
                        mean_defined(first.iter().map(|s| s.get(q))),
                        mean_defined(last.iter().map(|s| s.get(q))),
                    ),
                )
            })
            .collect();
        rows.push(PhaseRow {
            conversation_id: group[0].conversation_id.clone(),
            n_sessions: group.len(),
            values,
        });
    }
    Ok(rows)
}

/// Outcome information needed for cohort selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortCandidate {
    pub conversation_id: String,
    pub outcome: Option<Outcome>,
    pub outcome_reason: Option<String>,
    pub session_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub unsuccessful_codes: BTreeSet<String>,
    pub min_sessions: usize,
    pub first_k: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            unsuccessful_codes: ["s2", "s3", "s4", "s6", "c3"].iter().map(|s| s.to_string()).collect(),
            min_sessions: 3,
            first_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohorts {
    pub unsuccessful: Vec<String>,
    pub control: Vec<String>,
    pub warnings: Vec<String>,
}

/// Splits candidates into the unsuccessful group (reason code in the
/// configured set) and an equally sized, seeded sample of conversations
/// with no switch or cancel request. Both need `min_sessions` sessions.
pub fn cohort_filter(candidates: &[CohortCandidate], cfg: &CohortConfig, seed: u64) -> Cohorts {
    let mut unsuccessful: Vec<String> = candidates
        .iter()
        .filter(|c| c.session_count >= cfg.min_sessions)
        .filter(|c| c.outcome_reason.as_ref().is_some_and(|r| cfg.unsuccessful_codes.contains(r)))
        .map(|c| c.conversation_id.clone())
        .collect();
    unsuccessful.sort();

    let mut pool: Vec<&str> = candidates
        .iter()
        .filter(|c| c.session_count >= cfg.min_sessions)
        .filter(|c| c.outcome_reason.is_none() && c.outcome != Some(Outcome::Unsuccessful))
        .map(|c| c.conversation_id.as_str())
        .collect();
    pool.sort_unstable();

    let mut warnings = Vec::new();
    let mut control: Vec<String> = if pool.len() <= unsuccessful.len() {
        if pool.len() < unsuccessful.len() {
            warnings.push(format!(
                "control pool ({}) smaller than unsuccessful set ({}); using the full pool",
                pool.len(),
                unsuccessful.len()
            ));
        }
        pool.iter().map(|s| s.to_string()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "control-sample"));
        pool.choose_multiple(&mut rng, unsuccessful.len())
            .map(|s| s.to_string())
            .collect()
    };
    control.sort();
    Cohorts {
        unsuccessful,
        control,
        warnings,
    }
}

/// Per-conversation mean of a quantity over its first `first_k` sessions.
pub fn early_means(
    summaries: &[SessionSummary],
    conversation_ids: &[String],
    first_k: usize,
    q: Quantity,
) -> Vec<(String, f64)> {
    let wanted: BTreeSet<&str> = conversation_ids.iter().map(String::as_str).collect();
    summaries
        .chunk_by(|a, b| a.conversation_id == b.conversation_id)
        .filter(|g| wanted.contains(g[0].conversation_id.as_str()))
        .filter_map(|g| {
            let window = &g[..first_k.min(g.len())];
            mean_defined(window.iter().map(|s| s.get(q))).map(|m| (g[0].conversation_id.clone(), m))
        })
        .collect()
}
