//! Evaluation protocol: linearly weighted Cohen's kappa on a 4×4 confusion
//! matrix, the Wilcoxon signed-rank test on paired per-sample agreement, and
//! a PCA projection for inspecting learned features.

mod kappa;
mod pca;
mod wilcoxon;

pub use kappa::{
    confusion_matrix, kappa_from_labels, linear_weighted_kappa, per_sample_agreement,
    ConfusionMatrix, KappaResult,
};
pub use pca::{pca_project, PcaResult};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_with_exact_limit, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};
