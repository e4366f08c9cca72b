//! Two-sided Wilcoxon signed-rank test.
//!
//! Exact p-values by enumerating the signed-rank distribution for small
//! samples, normal approximation with tie correction above. Ties in the
//! absolute differences get average ranks; zeros are dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest sample size for which the exact distribution is enumerated.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Sum of ranks of the negative differences.
    pub w_minus: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub p_two_sided: f64,
    pub exact: bool,
    /// Significant at the 0.01 level.
    pub significant_01: bool,
    /// Significant at the 0.001 level.
    pub significant_001: bool,
}

/// Average ranks of the absolute differences (ties share their mean rank).
fn average_ranks(abs: &[f64]) -> Vec<f64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; n];
    let mut q = 0;
    while q < n {
        let mut r = q;
        while r + 1 < n && abs[order[r + 1]] == abs[order[q]] {
            r += 1;
        }
        // ranks are 1-based; tied block [q, r] shares the mean
        let mean = (q + r) as f64 / 2.0 + 1.0;
        for &idx in &order[q..=r] {
            ranks[idx] = mean;
        }
        q = r + 1;
    }
    ranks
}

/// Exact tail probabilities of `W+` by dynamic programming over doubled
/// ranks (doubling makes average ranks integral).
fn exact_p_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[w] = number of sign assignments with doubled W+ = w
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for w in (r..=total).rev() {
            counts[w] += counts[w - r];
        }
    }
    let n_assignments = 2.0f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let p_le: f64 = counts[..=w2].iter().sum::<f64>() / n_assignments;
    let p_ge: f64 = counts[w2..].iter().sum::<f64>() / n_assignments;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Φ(x) via the complementary error function (Abramowitz & Stegun 7.1.26).
fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

/// Run the test on paired differences (zeros are discarded).
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<WilcoxonResult> {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let n = nonzero.len();
    let mut w_plus = 0.0;
    for (d, r) in nonzero.iter().zip(&ranks) {
        if *d > 0.0 {
            w_plus += r;
        }
    }
    let rank_total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = rank_total - w_plus;

    let (p, exact) = if n <= EXACT_LIMIT {
        (exact_p_two_sided(&ranks, w_plus), true)
    } else {
        // normal approximation with tie correction
        let mean = rank_total / 2.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut q = 0;
        while q < n {
            let mut r = q;
            while r + 1 < n && sorted[r + 1] == sorted[q] {
                r += 1;
            }
            let t = (r - q + 1) as f64;
            tie_term += t * t * t - t;
            q = r + 1;
        }
        let var =
            n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        ((2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0), false)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p_two_sided: p,
        exact,
        significant_01: p < 0.01,
        significant_001: p < 0.001,
    })
}
