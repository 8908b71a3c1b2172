//! Domain expansion without forgetting: a small CNN whose batch
//! normalization can be pinned to the original domain's global statistics,
//! Elastic Weight Consolidation, synthetic two-domain data, and the
//! evaluation protocol (linear-weighted kappa, Wilcoxon signed-rank, PCA).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod ewc;
pub mod fsio;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
