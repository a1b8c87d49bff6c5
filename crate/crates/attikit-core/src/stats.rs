//! Nonparametric statistics used by the evaluation reports.

use crate::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Largest sample size for which the signed-rank null distribution is
/// enumerated exactly (via subset-sum counting); larger samples use the
/// normal approximation with tie and continuity corrections.
pub const WILCOXON_EXACT_LIMIT: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped (Wilcoxon's convention); ties in |d| get
/// average ranks. Returns `p = min(1, 2·min(P(W ≤ w), P(W ≥ w)))` under the
/// exact null for ≤ 25 non-zero pairs, otherwise the normal approximation.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Construction("paired samples differ in length"));
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(CoreError::Construction("non-finite difference in test"));
    }
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let n = diffs.len();

    // ranks of |d| with average ranks for ties, doubled so they stay integers
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut doubled_rank = vec![0i64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // average of ranks i+1 ..= j+1, doubled: (i+1 + j+1)
        let avg2 = (i + 1 + j + 1) as i64;
        for k in i..=j {
            doubled_rank[order[k]] = avg2;
        }
        i = j + 1;
    }

    let w_plus_doubled: i64 = (0..n)
        .filter(|&k| diffs[k] > 0.0)
        .map(|k| doubled_rank[k])
        .sum();

    if n <= WILCOXON_EXACT_LIMIT {
        Ok(exact_two_sided_p(&doubled_rank, w_plus_doubled))
    } else {
        diffs.sort_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap());
        Ok(normal_two_sided_p(&doubled_rank, w_plus_doubled))
    }
}

/// Exact two-sided p-value by dynamic programming over the distribution of
/// the positive-rank sum across all 2ⁿ sign assignments.
fn exact_two_sided_p(doubled_rank: &[i64], w_doubled: i64) -> f64 {
    let total: i64 = doubled_rank.iter().sum();
    // counts[s] = number of subsets whose doubled-rank sum is s
    let mut counts = vec![0.0f64; (total + 1) as usize];
    counts[0] = 1.0;
    for &r in doubled_rank {
        for s in (r..=total).rev() {
            let add = counts[(s - r) as usize];
            if add != 0.0 {
                counts[s as usize] += add;
            }
        }
    }
    let denom = (doubled_rank.len() as f64).exp2();
    let le: f64 = counts[..=(w_doubled as usize)].iter().sum::<f64>() / denom;
    let ge: f64 = counts[(w_doubled as usize)..].iter().sum::<f64>() / denom;
    (2.0 * le.min(ge)).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
fn normal_two_sided_p(doubled_rank: &[i64], w_doubled: i64) -> f64 {
    let n = doubled_rank.len() as f64;
    let w = w_doubled as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: subtract Σ(t³ - t)/48 over tie groups
    let mut tie_term = 0.0;
    let mut sorted = doubled_rank.to_vec();
    sorted.sort_unstable();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    // continuity correction toward the mean
    let z = if w > mean {
        (w - 0.5 - mean) / var.sqrt()
    } else {
        (w + 0.5 - mean) / var.sqrt()
    };
    (libm::erfc(z.abs() / core::f64::consts::SQRT_2)).min(1.0)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

/// Median with linear interpolation. Returns NaN on empty input.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Quantile with the common linear-interpolation rule (`h = (n-1)p`).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// (first quartile, median, third quartile).
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    (
        quantile(values, 0.25),
        quantile(values, 0.5),
        quantile(values, 0.75),
    )
}
