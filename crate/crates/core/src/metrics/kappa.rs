use crate::error::{Error, Result};
use crate::nn::NUM_CLASSES;

const K: usize = NUM_CLASSES;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

fn check_labels(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= K) {
        return Err(Error::Input(format!("label {bad} outside 0..{K}")));
    }
    Ok(())
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize]) -> Result<ConfusionMatrix> {
    check_labels(y_true, y_pred)?;
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaResult {
    pub kappa: f64,
    pub n: u64,
}

/// Cohen's kappa with disagreement weights `|i−j|/3`:
/// `κ = 1 − Σ w·o / Σ w·e`, `o` observed and `e` chance proportions.
pub fn linear_weighted_kappa(cm: &ConfusionMatrix) -> Result<KappaResult> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Input("kappa of an empty confusion matrix".into()));
    }
    let nf = n as f64;
    let mut rows = [0.0f64; K];
    let mut cols = [0.0f64; K];
    for i in 0..K {
        for j in 0..K {
            let c = cm.counts[i][j] as f64;
            rows[i] += c;
            cols[j] += c;
        }
    }
    let (mut observed, mut expected) = (0.0f64, 0.0f64);
    for i in 0..K {
        for j in 0..K {
            let w = i.abs_diff(j) as f64 / (K - 1) as f64;
            observed += w * cm.counts[i][j] as f64 / nf;
            expected += w * (rows[i] / nf) * (cols[j] / nf);
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedKappa);
    }
    Ok(KappaResult {
        kappa: 1.0 - observed / expected,
        n,
    })
}

pub fn kappa_from_labels(y_true: &[usize], y_pred: &[usize]) -> Result<KappaResult> {
    linear_weighted_kappa(&confusion_matrix(y_true, y_pred)?)
}

/// `1 − |ŷ−y|/3` per sample; the paired unit for significance tests.
pub fn per_sample_agreement(y_true: &[usize], y_pred: &[usize]) -> Result<Vec<f64>> {
    check_labels(y_true, y_pred)?;
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| (K - 1 - t.abs_diff(p)) as f64 / (K - 1) as f64)
        .collect())
}
