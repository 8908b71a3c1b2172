use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `n × k'` projected coordinates, row-major (`k' ≤ k`).
    pub projection: Vec<Vec<f64>>,
    /// Fraction of total variance captured by each kept component.
    pub explained: Vec<f64>,
    /// Unit loading vectors, one per kept component.
    pub components: Vec<Vec<f64>>,
    /// Set when the data had fewer than `k` non-degenerate directions.
    pub rank_deficient: bool,
}

/// Projects centred rows onto the top-`k` eigenvectors of their
/// covariance. Components come in descending eigenvalue order, each signed
/// so that its largest-magnitude loading is positive.
pub fn pca_project(features: &[Vec<f64>], k: usize) -> Result<PcaResult> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 2 || d < k || k == 0 {
        return Err(Error::Input(format!(
            "pca needs n ≥ 2 and d ≥ k ≥ 1, got n={n}, d={d}, k={k}"
        )));
    }
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::Input("ragged feature rows".into()));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d, |i, j| features[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let floor = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut components = Vec::new();
    let mut explained = Vec::new();
    for &idx in order.iter().take(k) {
        let lambda = eig.eigenvalues[idx];
        if total <= 0.0 || lambda <= floor {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i);
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(lambda / total);
    }
    let projection = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|v| (0..d).map(|j| centred[(i, j)] * v[j]).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        rank_deficient: components.len() < k,
        projection,
        explained,
        components,
    })
}
