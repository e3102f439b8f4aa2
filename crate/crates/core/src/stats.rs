//! Rank tests, bootstrap intervals and the within-session shuffle null.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::corpus::Role;
use crate::segmentation::{ConversationSessions, Session};
use crate::seed::derive_seed;

/// Largest number of non-zero differences for which the signed-rank test
/// enumerates its null distribution.
pub const WILCOXON_EXACT_MAX: usize = 20;
/// Largest smaller-group size for which the rank-sum test is exact.
pub const MANN_WHITNEY_EXACT_MAX: usize = 10;
/// Pooled sample size above which the rank-sum DP is skipped.
pub const MANN_WHITNEY_EXACT_POOLED_MAX: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("all differences are zero")]
    Degenerate,
    #[error("empty sample")]
    EmptySample,
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::NormalApprox => "normal_approx",
        }
    }
}

/// Treatment of zero differences in the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroMethod {
    /// Drop zeros before ranking.
    #[default]
    Wilcox,
    /// Rank zeros with the rest, then leave them out of the statistic.
    Pratt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    /// First (or only) sample size; for the signed-rank test, the number of
    /// non-zero differences.
    pub n: usize,
    pub m: Option<usize>,
    pub alternative: Alternative,
}

/// Mid-ranks (1-based) of `values`, plus tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Combines upper/lower tail probabilities for the requested alternative.
fn tails_to_p(upper: f64, lower: f64, alt: Alternative) -> f64 {
    let p = match alt {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => 2.0 * upper.min(lower),
    };
    p.clamp(0.0, 1.0)
}

/// Normal approximation with a 0.5 continuity correction.
fn normal_tails(stat: f64, mean: f64, var: f64) -> (f64, f64) {
    if var <= 0.0 {
        return (1.0, 1.0);
    }
    let sd = var.sqrt();
    let z_upper = (stat - mean - 0.5) / sd;
    let z_lower = (stat - mean + 0.5) / sd;
    let n = standard_normal();
    (n.sf(z_upper), n.cdf(z_lower))
}

/// Paired signed-rank test on `x − y`.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)], alt: Alternative) -> Result<TestResult, StatsError> {
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
    wilcoxon_signed_rank_diffs(&diffs, alt, ZeroMethod::Wilcox)
}

/// Signed-rank test on differences. The statistic is `W+`, the sum of the
/// mid-ranks of `|d|` over positive differences.
pub fn wilcoxon_signed_rank_diffs(
    diffs: &[f64],
    alt: Alternative,
    zeros: ZeroMethod,
) -> Result<TestResult, StatsError> {
    check_finite(diffs)?;
    let kept: Vec<f64> = match zeros {
        ZeroMethod::Wilcox => diffs.iter().copied().filter(|d| *d != 0.0).collect(),
        ZeroMethod::Pratt => diffs.to_vec(),
    };
    let (ranks, _) = midranks(&kept.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let active: Vec<(f64, f64)> = kept
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d != 0.0)
        .map(|(d, r)| (*d, *r))
        .collect();
    let n = active.len();
    if n == 0 {
        return Err(StatsError::Degenerate);
    }
    let w_plus: f64 = active.iter().filter(|(d, _)| *d > 0.0).map(|(_, r)| r).sum();

    let (upper, lower, method) = if n <= WILCOXON_EXACT_MAX {
        // Ranks are multiples of 1/2, so doubled ranks are integers.
        let doubled: Vec<usize> = active.iter().map(|(_, r)| (r * 2.0).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let obs = (w_plus * 2.0).round() as usize;
        let space = 2f64.powi(n as i32);
        let upper: f64 = counts[obs..].iter().sum::<f64>() / space;
        let lower: f64 = counts[..=obs].iter().sum::<f64>() / space;
        (upper, lower, Method::Exact)
    } else {
        let mean = active.iter().map(|(_, r)| r).sum::<f64>() / 2.0;
        let var = active.iter().map(|(_, r)| r * r).sum::<f64>() / 4.0;
        let (u, l) = normal_tails(w_plus, mean, var);
        (u, l, Method::NormalApprox)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: tails_to_p(upper, lower, alt),
        method,
        n,
        m: None,
        alternative: alt,
    })
}

/// Rank-sum test. The statistic is `U` for `x`: the number of pairs with
/// `x > y`, ties counting one half.
pub fn mann_whitney_u(x: &[f64], y: &[f64], alt: Alternative) -> Result<TestResult, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::EmptySample);
    }
    check_finite(x)?;
    check_finite(y)?;
    let (n, m) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_x: f64 = ranks[..n].iter().sum();
    let u = rank_sum_x - (n * (n + 1)) as f64 / 2.0;

    let spanning_tie = {
        let mut sorted_x = x.to_vec();
        sorted_x.sort_by(f64::total_cmp);
        y.iter()
            .any(|v| sorted_x.binary_search_by(|p| p.total_cmp(v)).is_ok())
    };
    let exact = n.min(m) <= MANN_WHITNEY_EXACT_MAX
        && !spanning_tie
        && n + m <= MANN_WHITNEY_EXACT_POOLED_MAX;

    let (upper, lower, method) = if exact {
        // Null distribution of the smaller group's rank sum over all
        // equally likely subsets, on doubled ranks.
        let (k, obs_small, small_is_x) = if n <= m {
            (n, rank_sum_x, true)
        } else {
            (m, ranks[n..].iter().sum::<f64>(), false)
        };
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let mut top = doubled.clone();
        top.sort_unstable_by(|a, b| b.cmp(a));
        let max_sum: usize = top[..k].iter().sum();
        let mut dp = vec![vec![0.0f64; max_sum + 1]; k + 1];
        dp[0][0] = 1.0;
        for (i, &r) in doubled.iter().enumerate() {
            for j in (1..=k.min(i + 1)).rev() {
                let (lower_rows, upper_rows) = dp.split_at_mut(j);
                let src = &lower_rows[j - 1];
                let dst = &mut upper_rows[0];
                for s in (0..=max_sum - r).rev() {
                    if src[s] != 0.0 {
                        dst[s + r] += src[s];
                    }
                }
            }
        }
        let dist = &dp[k];
        let space: f64 = dist.iter().sum();
        let obs = (obs_small * 2.0).round() as usize;
        let ge: f64 = dist[obs.min(max_sum + 1)..].iter().sum::<f64>() / space;
        let le: f64 = dist[..=obs.min(max_sum)].iter().sum::<f64>() / space;
        // Large rank sums of x mean large U; for y the direction flips.
        let (upper, lower) = if small_is_x { (ge, le) } else { (le, ge) };
        (upper, lower, Method::Exact)
    } else {
        let (nf, mf) = (n as f64, m as f64);
        let big_n = nf + mf;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
        let (up, lo) = normal_tails(u, nf * mf / 2.0, var);
        (up, lo, Method::NormalApprox)
    };
    Ok(TestResult {
        statistic: u,
        p_value: tails_to_p(upper, lower, alt),
        method,
        n,
        m: Some(m),
        alternative: alt,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean. Resample `i` draws from a
/// generator seeded with `seed + i`.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), StatsError> {
    bootstrap_ci_with(values, resamples, level, seed, mean)
}

pub fn bootstrap_ci_with<F>(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
    statistic: F,
) -> Result<(f64, f64), StatsError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if resamples == 0 {
        return Err(StatsError::Invalid("need at least one resample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Invalid(format!("level must be in (0,1), got {level}")));
    }
    check_finite(values)?;
    let n = values.len();
    let mut stats: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let sample: Vec<f64> = (0..n).map(|_| values[rng.random_range(0..n)]).collect();
            statistic(&sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&stats, alpha), quantile_sorted(&stats, 1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    /// Permute each role's utterances among that role's positions.
    #[default]
    WithinRole,
    /// Permute all utterance texts across all positions; roles stay with
    /// positions.
    Full,
}

/// Shuffled copy of a session. Ids, texts and meta travel together; roles
/// and timestamps stay with their positions.
pub fn shuffle_session(session: &Session, seed: u64, mode: ShuffleMode) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = session.utterances.clone();
    let groups: Vec<Vec<usize>> = match mode {
        ShuffleMode::WithinRole => [Role::A, Role::B]
            .iter()
            .map(|&r| (0..utterances.len()).filter(|&i| utterances[i].role == r).collect())
            .collect(),
        ShuffleMode::Full => vec![(0..utterances.len()).collect()],
    };
    for positions in groups {
        let mut sources = positions.clone();
        sources.shuffle(&mut rng);
        for (&dst, &src) in positions.iter().zip(&sources) {
            let from = &session.utterances[src];
            let to = &mut utterances[dst];
            to.id = from.id.clone();
            to.text = from.text.clone();
            to.meta = from.meta.clone();
            to.reply_to = from.reply_to.clone();
        }
    }
    Session::new(session.conversation_id.clone(), session.session_index, utterances)
}

/// Shuffles every session with a seed derived from `seed`, the conversation
/// id and the session index.
pub fn shuffle_sessions(conversations: &[ConversationSessions], seed: u64, mode: ShuffleMode) -> Vec<ConversationSessions> {
    conversations
        .iter()
        .map(|c| ConversationSessions {
            conversation_id: c.conversation_id.clone(),
            sessions: c
                .sessions
                .iter()
                .map(|s| {
                    let label = format!("shuffle/{}/{}", c.conversation_id, s.session_index);
                    shuffle_session(s, derive_seed(seed, &label), mode)
                })
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    #[test]
    fn midranks_average_ties() {
        let (r, t) = midranks(&[10.0, 20.0, 10.0, 30.0]);
        assert_eq!(r, vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(t, vec![2, 1, 1]);
    }

    #[test]
    fn signed_rank_worked_examples() {
        let r = wilcoxon_signed_rank_diffs(&[1.0, 2.0, 3.0], Alternative::Greater, ZeroMethod::Wilcox).unwrap();
        assert_eq!(r.statistic, 6.0);
        assert_eq!(r.p_value, 0.125);
        assert_eq!(r.method, Method::Exact);

        let r = wilcoxon_signed_rank_diffs(&[1.0, -1.0], Alternative::TwoSided, ZeroMethod::Wilcox).unwrap();
        assert_eq!(r.statistic, 1.5);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn signed_rank_all_zero_is_degenerate() {
        let pairs = [(1.0, 1.0), (2.0, 2.0)];
        assert_eq!(
            wilcoxon_signed_rank(&pairs, Alternative::TwoSided),
            Err(StatsError::Degenerate)
        );
    }

    #[test]
    fn pratt_keeps_zero_ranks_out_of_statistic() {
        // |d| = 0,1,2 -> ranks 1,2,3; positives: 1 and 2 -> W+ = 5
        let r = wilcoxon_signed_rank_diffs(&[0.0, 1.0, 2.0], Alternative::Greater, ZeroMethod::Pratt).unwrap();
        assert_eq!(r.statistic, 5.0);
        assert_eq!(r.n, 2);
        // only ranks 2 and 3 are random: W+ >= 5 in 1 of 4 assignments
        assert_eq!(r.p_value, 0.25);
    }

    #[test]
    fn signed_rank_switches_to_normal() {
        let d: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank_diffs(&d, Alternative::Greater, ZeroMethod::Wilcox).unwrap();
        assert_eq!(r.method, Method::NormalApprox);
        assert!(r.p_value < 1e-5);
    }

    #[test]
    fn rank_sum_worked_example() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.method, Method::Exact);
    }

    #[test]
    fn rank_sum_identical_samples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.method, Method::NormalApprox);
        assert_eq!(r.statistic, 4.5);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn rank_sum_swapped_groups_agree() {
        let x = [0.3, 1.7, 2.2, 5.1, 6.0, 7.5, 8.8, 9.1, 10.4, 11.0, 12.5, 13.3];
        let y = [0.1, 4.4, 4.9];
        let a = mann_whitney_u(&x, &y, Alternative::Greater).unwrap();
        let b = mann_whitney_u(&y, &x, Alternative::Less).unwrap();
        assert_eq!(a.method, Method::Exact);
        assert!((a.p_value - b.p_value).abs() < 1e-12);
        assert_eq!(a.statistic + b.statistic, (x.len() * y.len()) as f64);
    }

    #[test]
    fn rank_sum_empty_sample() {
        assert_eq!(
            mann_whitney_u(&[], &[1.0], Alternative::TwoSided),
            Err(StatsError::EmptySample)
        );
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let (lo, hi) = bootstrap_ci(&[2.5, 2.5, 2.5], 200, 0.95, 1).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
        let v: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        assert_eq!(bootstrap_ci(&v, 300, 0.95, 9).unwrap(), bootstrap_ci(&v, 300, 0.95, 9).unwrap());
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
        assert!(bootstrap_ci(&v, 0, 0.95, 0).is_err());
    }

    fn session(n: usize) -> Session {
        let utts = (0..n)
            .map(|i| {
                Utterance::new(
                    format!("u{i}"),
                    "c",
                    if i % 2 == 0 { Role::A } else { Role::B },
                    i as i64,
                    format!("text {i}"),
                )
            })
            .collect();
        Session::new("c", 0, utts)
    }

    #[test]
    fn shuffle_singletons_unchanged() {
        let s = session(2);
        for seed in 0..5 {
            assert_eq!(shuffle_session(&s, seed, ShuffleMode::WithinRole), s);
        }
    }

    #[test]
    fn shuffle_is_seeded_and_keeps_roles() {
        let s = session(10);
        let a = shuffle_session(&s, 7, ShuffleMode::WithinRole);
        assert_eq!(a, shuffle_session(&s, 7, ShuffleMode::WithinRole));
        assert_ne!(a, shuffle_session(&s, 8, ShuffleMode::WithinRole));
        for (orig, shuffled) in s.utterances.iter().zip(&a.utterances) {
            assert_eq!(orig.role, shuffled.role);
            assert_eq!(orig.timestamp, shuffled.timestamp);
        }
        for u in &a.utterances {
            let idx: usize = u.id[1..].parse().unwrap();
            assert_eq!(u.text, format!("text {idx}"));
            assert_eq!(idx % 2 == 0, u.role == Role::A);
        }
    }
}
