//! Two-sided nonparametric tests with exact small-sample distributions.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest Wilcoxon sample evaluated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 12;
/// Largest `n·m` for an exact Mann-Whitney p-value (ties force the
/// normal approximation).
pub const MANN_WHITNEY_EXACT_MAX_NM: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs or observations actually used.
    pub n: usize,
    pub exact: bool,
    /// Every paired difference was zero, so no test was possible.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, plus the sizes of tie groups.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn two_sided(lower: f64, upper: f64) -> f64 {
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.cdf(-z.abs())).min(1.0)
}

/// Paired signed-rank test on `a − b`; zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::invalid("b", format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX_N {
        // ranks are multiples of 1/2, so count sign patterns over 2·rank
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let w = (2.0 * w_plus).round() as usize;
        let total = 1u64 << n;
        let lower: u64 = counts[..=w].iter().sum();
        let upper: u64 = counts[w..].iter().sum();
        return Ok(TestResult {
            statistic: w_plus,
            p_value: two_sided(lower as f64 / total as f64, upper as f64 / total as f64),
            n,
            exact: true,
            degenerate: false,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (w_plus - mean) / var.sqrt();
    Ok(TestResult {
        statistic: w_plus,
        p_value: normal_two_sided(z),
        n,
        exact: false,
        degenerate: false,
    })
}

/// Rank-sum test between independent groups; the statistic is `U` of `a`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::invalid("a", "both groups need at least one value"));
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = average_ranks(&all);
    let r_a: f64 = ranks[..n].iter().sum();
    let u = r_a - (n * (n + 1)) as f64 / 2.0;

    if n * m <= MANN_WHITNEY_EXACT_MAX_NM && ties.is_empty() {
        // counts[k][u]: ways to choose k of the items seen so far with U = u
        let umax = n * m;
        let mut counts = vec![vec![0u64; umax + 1]; n + 1];
        counts[0][0] = 1;
        for item in 0..n + m {
            for k in (1..=n.min(item + 1)).rev() {
                // placing an `a` item after `item − (k−1)` b items adds that many to U
                let bs_before = item + 1 - k;
                if bs_before > m {
                    continue;
                }
                for s in (bs_before..=umax).rev() {
                    counts[k][s] += counts[k - 1][s - bs_before];
                }
            }
        }
        let dist = &counts[n];
        let total: u64 = dist.iter().sum();
        let ui = u.round() as usize;
        let lower: u64 = dist[..=ui].iter().sum();
        let upper: u64 = dist[ui..].iter().sum();
        return Ok(TestResult {
            statistic: u,
            p_value: two_sided(lower as f64 / total as f64, upper as f64 / total as f64),
            n: n + m,
            exact: true,
            degenerate: false,
        });
    }

    let (nf, mf) = (n as f64, m as f64);
    let big_n = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (big_n * (big_n - 1.0));
    let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term);
    let z = (u - nf * mf / 2.0) / var.sqrt();
    Ok(TestResult {
        statistic: u,
        p_value: if var > 0.0 { normal_two_sided(z) } else { 1.0 },
        n: n + m,
        exact: false,
        degenerate: var <= 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_one() {
        let a = [1.0, 2.0, 3.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.degenerate);
    }

    #[test]
    fn all_positive_n8() {
        let a: Vec<f64> = (1..=8).map(|i| i as f64 + 0.5).collect();
        let b: Vec<f64> = (1..=8).map(|i| i as f64 * 0.1).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 36.0);
        assert_eq!(r.p_value, 2.0 / 256.0);
    }

    #[test]
    fn separated_groups() {
        let a = [6.0, 7.0, 8.0, 9.0, 10.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.statistic, 25.0);
        assert_eq!(r.p_value, 2.0 / 252.0);
        let r = mann_whitney_u(&b, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 2.0 / 252.0);
    }

    #[test]
    fn ranks_average_ties() {
        let (r, t) = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 + if i % 3 == 0 { 1.5 } else { -0.5 }).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact && r.p_value > 0.0 && r.p_value <= 1.0);
        let r = mann_whitney_u(&a, &b).unwrap();
        assert!(!r.exact && r.p_value > 0.5);
    }
}
