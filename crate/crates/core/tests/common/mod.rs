// Brute-force enumeration oracles shared by integration tests.
#![allow(dead_code)]

use convo_redirect::stats::Alternative;

/// Mid-ranks by counting: rank = #smaller + (#equal + 1) / 2.
pub fn count_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| {
            let smaller = values.iter().filter(|w| *w < v).count() as f64;
            let equal = values.iter().filter(|w| *w == v).count() as f64;
            smaller + (equal + 1.0) / 2.0
        })
        .collect()
}

fn combine(ge: usize, le: usize, space: usize, alt: Alternative) -> f64 {
    let (ge, le) = (ge as f64 / space as f64, le as f64 / space as f64);
    match alt {
        Alternative::Greater => ge,
        Alternative::Less => le,
        Alternative::TwoSided => (2.0 * ge.min(le)).min(1.0),
    }
}

/// Signed-rank exact p over all 2^n sign assignments of the non-zero
/// differences. Returns `(W+, p)`.
pub fn wilcoxon_brute(diffs: &[f64], alt: Alternative) -> (f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|v| *v != 0.0).collect();
    let ranks = count_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut ge, mut le) = (0, 0);
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed {
            ge += 1;
        }
        if w <= observed {
            le += 1;
        }
    }
    (observed, combine(ge, le, 1 << n, alt))
}

fn subsets(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if cur.len() == k {
        visit(cur);
        return;
    }
    for i in start..n {
        if n - i < k - cur.len() {
            break;
        }
        cur.push(i);
        subsets(n, k, i + 1, cur, visit);
        cur.pop();
    }
}

/// Rank-sum exact p over all C(n+m, n) assignments of pooled mid-ranks to
/// `x`. Returns `(U of x, p)`.
pub fn mann_whitney_brute(x: &[f64], y: &[f64], alt: Alternative) -> (f64, f64) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = count_ranks(&pooled);
    let n = x.len();
    let offset = (n * (n + 1)) as f64 / 2.0;
    let observed = ranks[..n].iter().sum::<f64>() - offset;
    let (mut ge, mut le, mut space) = (0, 0, 0);
    subsets(pooled.len(), n, 0, &mut Vec::new(), &mut |idx| {
        let u = idx.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
        space += 1;
        if u >= observed {
            ge += 1;
        }
        if u <= observed {
            le += 1;
        }
    });
    (observed, combine(ge, le, space, alt))
}
