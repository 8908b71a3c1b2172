//! The classifier and its switchable batch normalization.

mod batchnorm;
mod network;

pub use batchnorm::{
    batchnorm_forward, BatchNormLayer, DomainTag, RunningStats, StatSource, DEFAULT_EPS,
    DEFAULT_MOMENTUM,
};
pub use network::{
    argmax_rows, trainable_parameters, ForwardPass, Network, ParamMap, ParamMask, Regime,
    ARCHITECTURE_FINGERPRINT, BN1_BETA, BN1_GAMMA, BN2_BETA, BN2_GAMMA, CONV1_W, CONV2_W,
    DENSE_B, DENSE_W, IMAGE_SIDE, NUM_CLASSES, PARAM_NAMES,
};
