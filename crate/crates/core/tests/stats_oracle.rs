// Exact tests against full enumeration, plus bootstrap and shuffle properties.

mod common;

use std::collections::BTreeMap;

use common::{mann_whitney_brute, wilcoxon_brute};
use convo_redirect::corpus::{Role, Utterance};
use convo_redirect::segmentation::Session;
use convo_redirect::stats::{
    bootstrap_ci, mann_whitney_u, shuffle_session, wilcoxon_signed_rank_diffs, Alternative, Method, ShuffleMode,
    ZeroMethod,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn alternative() -> impl Strategy<Value = Alternative> {
    prop_oneof![Just(Alternative::TwoSided), Just(Alternative::Greater), Just(Alternative::Less)]
}

/// Small integers give plenty of tied magnitudes and zeros.
fn diffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![(-5i32..=5).prop_map(f64::from), -10.0f64..10.0], 1..=10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn signed_rank_matches_enumeration(d in diffs(), alt in alternative()) {
        prop_assume!(d.iter().any(|v| *v != 0.0));
        let got = wilcoxon_signed_rank_diffs(&d, alt, ZeroMethod::Wilcox).unwrap();
        let (w, p) = wilcoxon_brute(&d, alt);
        prop_assert_eq!(got.method, Method::Exact);
        prop_assert_eq!(got.statistic, w);
        prop_assert!((got.p_value - p).abs() < 1e-12, "{} vs {}", got.p_value, p);
    }

    #[test]
    fn rank_sum_matches_enumeration(
        x in prop::collection::vec(0i32..8, 1..=8),
        y in prop::collection::vec(0i32..8, 1..=8),
        alt in alternative(),
    ) {
        // Even values for x and odd for y: ties only within a group.
        let x: Vec<f64> = x.iter().map(|v| f64::from(2 * v)).collect();
        let y: Vec<f64> = y.iter().map(|v| f64::from(2 * v + 1)).collect();
        let got = mann_whitney_u(&x, &y, alt).unwrap();
        let (u, p) = mann_whitney_brute(&x, &y, alt);
        prop_assert_eq!(got.method, Method::Exact);
        prop_assert_eq!(got.statistic, u);
        prop_assert!((got.p_value - p).abs() < 1e-12, "{} vs {}", got.p_value, p);
    }

    #[test]
    fn rank_sum_continuous_samples(
        x in prop::collection::vec(-5.0f64..5.0, 1..=10),
        y in prop::collection::vec(-5.0f64..5.0, 1..=6),
        alt in alternative(),
    ) {
        prop_assume!(!x.iter().any(|v| y.contains(v)));
        let got = mann_whitney_u(&x, &y, alt).unwrap();
        let (u, p) = mann_whitney_brute(&x, &y, alt);
        prop_assert_eq!(got.method, Method::Exact);
        prop_assert_eq!(got.statistic, u);
        prop_assert!((got.p_value - p).abs() < 1e-12);
    }

    #[test]
    fn spanning_ties_use_normal_approximation(
        x in prop::collection::vec(0i32..4, 2..=8),
        y in prop::collection::vec(0i32..4, 2..=8),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = (x.into_iter().map(f64::from).collect(), y.into_iter().map(f64::from).collect());
        prop_assume!(x.iter().any(|v| y.contains(v)));
        let got = mann_whitney_u(&x, &y, Alternative::TwoSided).unwrap();
        prop_assert_eq!(got.method, Method::NormalApprox);
        prop_assert!((0.0..=1.0).contains(&got.p_value));
    }

    #[test]
    fn larger_positive_difference_never_raises_p(d in prop::collection::vec(-10.0f64..10.0, 1..=9)) {
        prop_assume!(d.iter().any(|v| *v != 0.0));
        let before = wilcoxon_signed_rank_diffs(&d, Alternative::Greater, ZeroMethod::Wilcox).unwrap();
        let mut more = d.clone();
        more.push(d.iter().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0);
        let after = wilcoxon_signed_rank_diffs(&more, Alternative::Greater, ZeroMethod::Wilcox).unwrap();
        prop_assert!(after.p_value <= before.p_value + 1e-15);
    }

    #[test]
    fn shuffle_keeps_texts_per_role(lens in 2usize..14, seed in any::<u64>(), full in any::<bool>()) {
        let session = session_of(lens);
        let mode = if full { ShuffleMode::Full } else { ShuffleMode::WithinRole };
        let shuffled = shuffle_session(&session, seed, mode);
        prop_assert_eq!(shuffled.utterances.len(), session.utterances.len());
        if !full {
            prop_assert_eq!(texts_by_role(&shuffled), texts_by_role(&session));
            for (a, b) in shuffled.utterances.iter().zip(&session.utterances) {
                prop_assert_eq!(a.role, b.role);
            }
        }
        prop_assert_eq!(shuffle_session(&session, seed, mode).utterances, shuffled.utterances);
    }
}

fn session_of(n: usize) -> Session {
    let utts = (0..n)
        .map(|i| {
            let role = if i % 2 == 0 { Role::A } else { Role::B };
            Utterance::new(format!("u{i}"), "c", role, i as i64, format!("text number {i}"))
        })
        .collect();
    Session::new("c", 0, utts)
}

fn texts_by_role(s: &Session) -> BTreeMap<Role, Vec<String>> {
    let mut out: BTreeMap<Role, Vec<String>> = BTreeMap::new();
    for u in &s.utterances {
        out.entry(u.role).or_default().push(u.text.clone());
    }
    for v in out.values_mut() {
        v.sort();
    }
    out
}

#[test]
fn worked_examples_are_exact() {
    let r = wilcoxon_signed_rank_diffs(&[1.0, 2.0, 3.0], Alternative::Greater, ZeroMethod::Wilcox).unwrap();
    assert_eq!((r.statistic, r.p_value), (6.0, 1.0 / 8.0));
    let r = wilcoxon_signed_rank_diffs(&[1.0, -1.0], Alternative::TwoSided, ZeroMethod::Wilcox).unwrap();
    assert_eq!((r.statistic, r.p_value), (1.5, 1.0));
    let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::TwoSided).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 2.0 / 6.0);
}

#[test]
fn eight_by_eight_random_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let got = mann_whitney_u(&x, &y, Alternative::TwoSided).unwrap();
        assert_eq!(got.p_value, mann_whitney_brute(&x, &y, Alternative::TwoSided).1);
    }
}

#[test]
fn bootstrap_width_tracks_standard_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (lo, hi) = bootstrap_ci(&values, 2000, 0.95, 3).unwrap();
    let analytic = 2.0 * 1.96 / (1000f64).sqrt();
    assert!(((hi - lo) - analytic).abs() < 0.2 * analytic, "width {} vs {}", hi - lo, analytic);
    assert_eq!(bootstrap_ci(&values, 2000, 0.95, 3).unwrap(), (lo, hi));
    // Resample i uses seed + i, so nearby seeds share most resamples.
    assert_ne!(bootstrap_ci(&values, 2000, 0.95, 1_000_000).unwrap(), (lo, hi));
}
