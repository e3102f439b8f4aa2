//! Distinguishing terms between two corpora: log-odds ratios with an
//! informative Dirichlet prior built from the pooled counts (Monroe et al.).

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::segmentation::Session;
use crate::tokenize::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum FightinError {
    #[error("corpus {0} is empty")]
    EmptyCorpus(u8),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary has {0} term(s); at least 2 are needed")]
    TinyVocabulary(usize),
    #[error("need at least 2 sessions, got {0}")]
    TooFewSessions(usize),
}

pub type TermCounts = BTreeMap<String, u64>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermContrast {
    pub term: String,
    pub delta: f64,
    pub z: f64,
    pub count_1: u64,
    pub count_2: u64,
}

/// Unigram counts, plus within-text bigrams (joined by a space) when
/// `ngram_max` is 2.
pub fn term_counts<S: AsRef<str>>(texts: &[S], ngram_max: usize) -> TermCounts {
    let mut counts = TermCounts::new();
    for text in texts {
        let toks = tokenize(text.as_ref());
        for t in &toks {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        if ngram_max >= 2 {
            for pair in toks.windows(2) {
                *counts.entry(format!("{} {}", pair[0], pair[1])).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Contrast of corpus 1 against corpus 2, sorted by z (descending) then
/// term. Positive z means over-represented in corpus 1.
pub fn log_odds_z(
    counts_1: &TermCounts,
    counts_2: &TermCounts,
    alpha_0: f64,
) -> Result<Vec<TermContrast>, FightinError> {
    if !(alpha_0.is_finite() && alpha_0 > 0.0) {
        return Err(FightinError::Config(format!("alpha_0 must be positive, got {alpha_0}")));
    }
    let n1: u64 = counts_1.values().sum();
    let n2: u64 = counts_2.values().sum();
    if n1 == 0 {
        return Err(FightinError::EmptyCorpus(1));
    }
    if n2 == 0 {
        return Err(FightinError::EmptyCorpus(2));
    }
    let n_pooled = (n1 + n2) as f64;
    let (n1, n2) = (n1 as f64, n2 as f64);
    let vocab: BTreeSet<&String> = counts_1.keys().chain(counts_2.keys()).collect();
    if vocab.len() < 2 {
        return Err(FightinError::TinyVocabulary(vocab.len()));
    }
    let mut out: Vec<TermContrast> = vocab
        .into_iter()
        .map(|term| {
            let c1 = counts_1.get(term).copied().unwrap_or(0);
            let c2 = counts_2.get(term).copied().unwrap_or(0);
            let (y1, y2) = (c1 as f64, c2 as f64);
            let alpha = alpha_0 * (y1 + y2) / n_pooled;
            let l1 = ((y1 + alpha) / (n1 + alpha_0 - y1 - alpha)).ln();
            let l2 = ((y2 + alpha) / (n2 + alpha_0 - y2 - alpha)).ln();
            let delta = l1 - l2;
            let var = 1.0 / (y1 + alpha) + 1.0 / (y2 + alpha);
            TermContrast {
                term: term.clone(),
                delta,
                z: delta / var.sqrt(),
                count_1: c1,
                count_2: c2,
            }
        })
        .collect();
    out.sort_by(|a, b| b.z.total_cmp(&a.z).then_with(|| a.term.cmp(&b.term)));
    Ok(out)
}

/// Session openers vs. every other utterance, and session closers vs.
/// every other utterance.
pub fn boundary_validation(
    sessions: &[Session],
    ngram_max: usize,
    alpha_0: f64,
) -> Result<(Vec<TermContrast>, Vec<TermContrast>), FightinError> {
    if sessions.len() < 2 {
        return Err(FightinError::TooFewSessions(sessions.len()));
    }
    let mut first = Vec::new();
    let mut not_first = Vec::new();
    let mut last = Vec::new();
    let mut not_last = Vec::new();
    for s in sessions {
        let n = s.utterances.len();
        for (i, u) in s.utterances.iter().enumerate() {
            let text = u.text.as_str();
            if i == 0 { first.push(text) } else { not_first.push(text) }
            if i + 1 == n { last.push(text) } else { not_last.push(text) }
        }
    }
    let opening = log_odds_z(
        &term_counts(&first, ngram_max),
        &term_counts(&not_first, ngram_max),
        alpha_0,
    )?;
    let closing = log_odds_z(
        &term_counts(&last, ngram_max),
        &term_counts(&not_last, ngram_max),
        alpha_0,
    )?;
    Ok((opening, closing))
}
