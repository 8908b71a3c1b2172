use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;

/// Differences whose magnitudes agree to this relative tolerance are ties;
/// agreement scores are multiples of 1/3 and their differences pick up
/// rounding noise.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// `min(R+, R−)`.
    pub w: f64,
    pub r_plus: f64,
    pub r_minus: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped, tied magnitudes get midranks. Up to
/// [`EXACT_MAX_N`] pairs the null distribution of the positive rank sum is
/// counted exactly over all `2ⁿ` sign assignments; beyond that a normal
/// approximation with tie-corrected variance and continuity correction is
/// used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_with_exact_limit(a, b, EXACT_MAX_N)
}

/// As [`wilcoxon_signed_rank`] with a custom exact/normal threshold.
pub fn wilcoxon_with_exact_limit(a: &[f64], b: &[f64], exact_max_n: usize) -> Result<WilcoxonResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "paired samples need equal non-zero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| d.abs() > TIE_TOL * scale)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w: 0.0,
            r_plus: 0.0,
            r_minus: 0.0,
            p: 1.0,
            n_effective: 0,
            method: WilcoxonMethod::Exact,
        });
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));

    // doubled midranks keep everything integral
    let mut rank2 = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() - diffs[i].abs() <= TIE_TOL * scale {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        rank2[i..=j].iter_mut().for_each(|r| *r = r2);
        tie_sizes.push((j - i + 1) as u64);
        i = j + 1;
    }
    let plus2: u64 = diffs
        .iter()
        .zip(&rank2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total2 = (n * (n + 1)) as u64;
    let minus2 = total2 - plus2;
    let w2 = plus2.min(minus2);

    let (p, method) = if n <= exact_max_n {
        (exact_p(&rank2, w2), WilcoxonMethod::Exact)
    } else {
        (normal_p(n, plus2, &tie_sizes), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        w: w2 as f64 / 2.0,
        r_plus: plus2 as f64 / 2.0,
        r_minus: minus2 as f64 / 2.0,
        p,
        n_effective: n,
        method,
    })
}

/// `min(1, 2·P(R+ ≤ w))` with the null distribution of the doubled positive
/// rank sum counted by dynamic programming over the ranks.
fn exact_p(rank2: &[u64], w2: u64) -> f64 {
    let total: u64 = rank2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in rank2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let tail: u64 = counts[..=w2 as usize].iter().sum();
    let all = 1u64 << rank2.len();
    (2.0 * tail as f64 / all as f64).min(1.0)
}

fn normal_p(n: usize, plus2: u64, tie_sizes: &[u64]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_adj: f64 = tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj;
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((plus2 as f64 / 2.0 - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}
