//! The fixed two-convolution classifier.
//!
//! `conv(1→8, 3×3, s1, p1) → BN → relu → conv(8→16, 3×3, s2, p1) → BN → relu
//! → global average pool → dense(16→4)` on `[n,1,28,28]` inputs. The strided
//! convolution rounds its output down to 14×14.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::batchnorm::{BatchNormLayer, DomainTag, StatSource};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 4;
pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;

/// Identifies the architecture inside checkpoints.
pub const ARCHITECTURE_FINGERPRINT: &str =
    "in1x28x28|conv8k3s1p1|bn|relu|conv16k3s2p1|bn|relu|gap|dense16x4|v1";

/// Named parameter tensors, iterated in sorted key order.
pub type ParamMap = BTreeMap<String, Tensor>;

pub const CONV1_W: &str = "conv1.weight";
pub const BN1_GAMMA: &str = "bn1.gamma";
pub const BN1_BETA: &str = "bn1.beta";
pub const CONV2_W: &str = "conv2.weight";
pub const BN2_GAMMA: &str = "bn2.gamma";
pub const BN2_BETA: &str = "bn2.beta";
pub const DENSE_W: &str = "dense.weight";
pub const DENSE_B: &str = "dense.bias";

/// Every parameter name, sorted.
pub const PARAM_NAMES: [&str; 8] = [
    BN1_BETA, BN1_GAMMA, BN2_BETA, BN2_GAMMA, CONV1_W, CONV2_W, DENSE_B, DENSE_W,
];

/// Which parameters move during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Regime {
    AllLayers,
    BNOnly,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::AllLayers => "all-layers",
            Regime::BNOnly => "bn-only",
        })
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-layers" | "all" => Ok(Regime::AllLayers),
            "bn-only" | "bn" => Ok(Regime::BNOnly),
            _ => Err(Error::Input(format!(
                "unknown regime `{s}` (expected all-layers or bn-only)"
            ))),
        }
    }
}

/// Set of trainable parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask(BTreeSet<&'static str>);

impl ParamMask {
    pub fn all() -> Self {
        Self(PARAM_NAMES.iter().copied().collect())
    }

    pub fn none() -> Self {
        Self(BTreeSet::new())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.0.iter().copied()
    }

    /// Number of scalar parameters covered by the mask.
    pub fn count(&self, net: &Network) -> usize {
        self.0
            .iter()
            .map(|n| net.param(n).map_or(0, Tensor::numel))
            .sum()
    }
}

/// Trainable set for a fine-tuning regime.
pub fn trainable_parameters(regime: Regime) -> ParamMask {
    match regime {
        Regime::AllLayers => ParamMask::all(),
        Regime::BNOnly => ParamMask(
            [BN1_GAMMA, BN1_BETA, BN2_GAMMA, BN2_BETA]
                .into_iter()
                .collect(),
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub conv1: Tensor,
    pub bn1: BatchNormLayer,
    pub conv2: Tensor,
    pub bn2: BatchNormLayer,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    source: StatSource,
}

/// Graph nodes produced by one forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    /// Pooled features `[n,16]` feeding the dense layer.
    pub features: Var,
    pub params: BTreeMap<&'static str, Var>,
}

impl ForwardPass {
    /// Gradients of every parameter that was trainable in this pass.
    pub fn grads(&self) -> ParamMap {
        self.params
            .iter()
            .map(|(&n, &v)| (n.to_string(), self.graph.grad(v)))
            .collect()
    }

    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }
}

impl Network {
    /// He-normal convolutions and dense weights, unit γ, zero β and bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut he = |shape: &[usize], fan_in: usize| {
            let n = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let len: usize = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| n.sample(rng) as f32).collect())
                .expect("shape matches")
        };
        let conv1 = he(&[CONV1_CHANNELS, 1, 3, 3], 9);
        let conv2 = he(&[CONV2_CHANNELS, CONV1_CHANNELS, 3, 3], CONV1_CHANNELS * 9);
        let dense_w = he(&[CONV2_CHANNELS, NUM_CLASSES], CONV2_CHANNELS);
        Self {
            conv1,
            bn1: BatchNormLayer::new(CONV1_CHANNELS),
            conv2,
            bn2: BatchNormLayer::new(CONV2_CHANNELS),
            dense_w,
            dense_b: Tensor::zeros(&[NUM_CLASSES]),
            source: StatSource::CurrentBatch(DomainTag::O),
        }
    }

    /// Network with exactly the given parameters and no running statistics.
    pub fn from_parameters(params: &ParamMap) -> Result<Self> {
        let mut net = Self {
            conv1: Tensor::zeros(&[CONV1_CHANNELS, 1, 3, 3]),
            bn1: BatchNormLayer::new(CONV1_CHANNELS),
            conv2: Tensor::zeros(&[CONV2_CHANNELS, CONV1_CHANNELS, 3, 3]),
            bn2: BatchNormLayer::new(CONV2_CHANNELS),
            dense_w: Tensor::zeros(&[CONV2_CHANNELS, NUM_CLASSES]),
            dense_b: Tensor::zeros(&[NUM_CLASSES]),
            source: StatSource::CurrentBatch(DomainTag::O),
        };
        if let Some(missing) = PARAM_NAMES.iter().find(|n| !params.contains_key(**n)) {
            return Err(Error::State(format!("parameter `{missing}` missing")));
        }
        net.load_parameters(params)?;
        Ok(net)
    }

    pub fn bn_source(&self) -> StatSource {
        self.source
    }

    pub fn bn_layers(&self) -> [(&'static str, &BatchNormLayer); 2] {
        [("bn1", &self.bn1), ("bn2", &self.bn2)]
    }

    pub fn bn_layers_mut(&mut self) -> [(&'static str, &mut BatchNormLayer); 2] {
        [("bn1", &mut self.bn1), ("bn2", &mut self.bn2)]
    }

    /// Switches every BN layer to `source`. Frozen sources require the
    /// domain's statistics in every layer; on error nothing changes.
    pub fn set_bn_source(&mut self, source: StatSource) -> Result<()> {
        if let StatSource::FrozenGlobal(d) = source {
            for (name, layer) in self.bn_layers() {
                if layer.running_stats(d).is_none() {
                    return Err(Error::State(format!(
                        "layer {name} has no running statistics for domain {d}"
                    )));
                }
            }
        }
        self.source = source;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            CONV1_W => &self.conv1,
            BN1_GAMMA => &self.bn1.gamma,
            BN1_BETA => &self.bn1.beta,
            CONV2_W => &self.conv2,
            BN2_GAMMA => &self.bn2.gamma,
            BN2_BETA => &self.bn2.beta,
            DENSE_W => &self.dense_w,
            DENSE_B => &self.dense_b,
            _ => return None,
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            CONV1_W => &mut self.conv1,
            BN1_GAMMA => &mut self.bn1.gamma,
            BN1_BETA => &mut self.bn1.beta,
            CONV2_W => &mut self.conv2,
            BN2_GAMMA => &mut self.bn2.gamma,
            BN2_BETA => &mut self.bn2.beta,
            DENSE_W => &mut self.dense_w,
            DENSE_B => &mut self.dense_b,
            _ => return None,
        })
    }

    /// Copy of every parameter, keyed by name.
    pub fn parameters(&self) -> ParamMap {
        PARAM_NAMES
            .iter()
            .map(|&n| (n.to_string(), self.param(n).expect("known name").clone()))
            .collect()
    }

    /// Overwrites parameters present in `params`; names and shapes must match.
    pub fn load_parameters(&mut self, params: &ParamMap) -> Result<()> {
        for (name, t) in params {
            let slot = self
                .param(name)
                .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::State(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
        }
        for (name, t) in params {
            *self.param_mut(name).expect("checked") = t.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        ParamMask::all().count(self)
    }

    fn check_batch(batch: &Tensor) -> Result<usize> {
        match batch.shape() {
            [n, 1, IMAGE_SIDE, IMAGE_SIDE] => Ok(*n),
            s => shape_err(format!(
                "expected images [n,1,{IMAGE_SIDE},{IMAGE_SIDE}], got {s:?}"
            )),
        }
    }

    fn run(
        &self,
        batch: &Tensor,
        training: bool,
        mask: &ParamMask,
    ) -> Result<(ForwardPass, [Option<crate::autodiff::BatchMoments>; 2])> {
        Self::check_batch(batch)?;
        let mut g = Graph::new();
        let mut params = BTreeMap::new();
        let mut leaf = |g: &mut Graph, name: &'static str, t: &Tensor| {
            if mask.contains(name) {
                let v = g.param(t.clone());
                params.insert(name, v);
                v
            } else {
                g.constant(t.clone())
            }
        };
        let x = g.constant(batch.clone());
        let w1 = leaf(&mut g, CONV1_W, &self.conv1);
        let g1 = leaf(&mut g, BN1_GAMMA, &self.bn1.gamma);
        let b1 = leaf(&mut g, BN1_BETA, &self.bn1.beta);
        let w2 = leaf(&mut g, CONV2_W, &self.conv2);
        let g2 = leaf(&mut g, BN2_GAMMA, &self.bn2.gamma);
        let b2 = leaf(&mut g, BN2_BETA, &self.bn2.beta);
        let wd = leaf(&mut g, DENSE_W, &self.dense_w);
        let bd = leaf(&mut g, DENSE_B, &self.dense_b);

        let h = g.conv2d(x, w1, 1, 1)?;
        let (h, m1) = self.bn1.forward(&mut g, h, g1, b1, self.source, training)?;
        let h = g.relu(h);
        let h = g.conv2d_floor(h, w2, 2, 1)?;
        let (h, m2) = self.bn2.forward(&mut g, h, g2, b2, self.source, training)?;
        let h = g.relu(h);
        let features = g.global_avg_pool(h)?;
        let z = g.matmul(features, wd)?;
        let logits = g.add_row_bias(z, bd)?;
        Ok((
            ForwardPass {
                graph: g,
                logits,
                features,
                params,
            },
            [m1, m2],
        ))
    }

    /// Forward pass with the current statistics source. In training mode
    /// with a `CurrentBatch` source, the active domain's running statistics
    /// absorb this batch's moments.
    pub fn forward(&mut self, batch: &Tensor, training: bool, mask: &ParamMask) -> Result<ForwardPass> {
        let (pass, moments) = self.run(batch, training, mask)?;
        if let StatSource::CurrentBatch(d) = self.source {
            for ((_, layer), m) in self.bn_layers_mut().into_iter().zip(moments) {
                if let Some(m) = m {
                    layer.update_running_stats(&m, d);
                }
            }
        }
        Ok(pass)
    }

    /// Inference-mode forward pass that still records gradients for the
    /// parameters in `mask`.
    pub fn infer_with_grads(&self, batch: &Tensor, mask: &ParamMask) -> Result<ForwardPass> {
        Ok(self.run(batch, false, mask)?.0)
    }

    /// Inference-mode forward pass; never mutates the network.
    pub fn infer(&self, batch: &Tensor) -> Result<ForwardPass> {
        Ok(self.run(batch, false, &ParamMask::none())?.0)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.infer(batch)?;
        Ok(pass.logits().clone())
    }

    /// Pooled `[n,16]` features that feed the dense layer.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let pass = self.infer(batch)?;
        Ok(pass.graph.value(pass.features).clone())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }
}

/// Row-wise argmax of `[n,K]`; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
