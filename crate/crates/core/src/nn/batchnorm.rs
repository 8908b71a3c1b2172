//! Batch normalization with per-domain running statistics.
//!
//! Each layer keeps one `(μ_g, σ²_g)` slot per [`DomainTag`]. A
//! [`StatSource`] decides where the normalizing statistics come from:
//!
//! * `CurrentBatch(d)`: batch moments while training (and the slot for `d`
//!   tracks them), the running statistics of `d` at inference.
//! * `FrozenGlobal(d)`: the stored statistics of `d` in both training and
//!   inference. The slot is never written, and every sample is normalized
//!   independently of its batch-mates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

/// Which cohort a sample (or a statistics slot) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainTag {
    /// The original, multi-scanner domain.
    O,
    /// The target domain.
    T,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::O => "O",
            DomainTag::T => "T",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" | "o" => Ok(DomainTag::O),
            "T" | "t" => Ok(DomainTag::T),
            _ => Err(Error::Input(format!("unknown domain `{s}` (expected O or T)"))),
        }
    }
}

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StatSource {
    CurrentBatch(DomainTag),
    FrozenGlobal(DomainTag),
}

impl StatSource {
    pub fn domain(self) -> DomainTag {
        match self {
            StatSource::CurrentBatch(d) | StatSource::FrozenGlobal(d) => d,
        }
    }
}

impl fmt::Display for StatSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatSource::CurrentBatch(d) => write!(f, "batch-{}", d.as_str().to_lowercase()),
            StatSource::FrozenGlobal(d) => write!(f, "frozen-{}", d.as_str().to_lowercase()),
        }
    }
}

impl From<StatSource> for String {
    fn from(s: StatSource) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for StatSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for StatSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, dom) = s
            .split_once('-')
            .ok_or_else(|| Error::Input(format!("bad statistics source `{s}`")))?;
        let d: DomainTag = dom.parse()?;
        match kind {
            "batch" => Ok(StatSource::CurrentBatch(d)),
            "frozen" => Ok(StatSource::FrozenGlobal(d)),
            _ => Err(Error::Input(format!(
                "bad statistics source `{s}` (expected batch-o, batch-t, frozen-o or frozen-t)"
            ))),
        }
    }
}

/// Global statistics of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    /// Population variance, never negative.
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
    pub momentum: f32,
    running: BTreeMap<DomainTag, RunningStats>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            running: BTreeMap::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_stats(&self, domain: DomainTag) -> Option<&RunningStats> {
        self.running.get(&domain)
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainTag> + '_ {
        self.running.keys().copied()
    }

    /// Installs a statistics slot directly (checkpoint loading, tests).
    pub fn set_running_stats(&mut self, domain: DomainTag, stats: RunningStats) -> Result<()> {
        let c = self.channels();
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "running stats of length {}/{} for {c} channels",
                stats.mean.len(),
                stats.var.len()
            )));
        }
        if stats.var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Input("running variance must be non-negative".into()));
        }
        self.running.insert(domain, stats);
        Ok(())
    }

    /// Exponential moving average update of the slot for `domain`; the
    /// first update initializes the slot with the batch moments.
    pub fn update_running_stats(&mut self, moments: &BatchMoments, domain: DomainTag) {
        let m = self.momentum;
        match self.running.get_mut(&domain) {
            None => {
                self.running.insert(
                    domain,
                    RunningStats {
                        mean: moments.mean.clone(),
                        var: moments.var.clone(),
                    },
                );
            }
            Some(s) => {
                for (g, b) in s.mean.iter_mut().zip(&moments.mean) {
                    *g = (1.0 - m) * *g + m * b;
                }
                for (g, b) in s.var.iter_mut().zip(&moments.var) {
                    *g = ((1.0 - m) * *g + m * b).max(0.0);
                }
            }
        }
    }

    fn stats_for(&self, domain: DomainTag) -> Result<&RunningStats> {
        self.running.get(&domain).ok_or_else(|| {
            Error::State(format!("no running statistics for domain {domain}"))
        })
    }

    /// Normalizes `x[N,C,...]` with `gamma`/`beta` nodes already on the graph.
    ///
    /// Returns the batch moments when they were computed (batch mode while
    /// training); the caller decides when to fold them into the running
    /// statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        gamma: Var,
        beta: Var,
        source: StatSource,
        training: bool,
    ) -> Result<(Var, Option<BatchMoments>)> {
        match source {
            StatSource::CurrentBatch(_) if training => {
                let (y, mom) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(mom)))
            }
            StatSource::CurrentBatch(d) | StatSource::FrozenGlobal(d) => {
                let s = self.stats_for(d)?;
                let y = g.batch_norm_fixed(x, gamma, beta, &s.mean, &s.var, self.eps)?;
                Ok((y, None))
            }
        }
    }
}

/// Stand-alone batch normalization of `x` through a layer, updating the
/// layer's running statistics when batch moments are used for training.
pub fn batchnorm_forward(
    g: &mut Graph,
    x: Var,
    layer: &mut BatchNormLayer,
    source: StatSource,
    training: bool,
) -> Result<(Var, Var, Var)> {
    let gamma = g.param(layer.gamma.clone());
    let beta = g.param(layer.beta.clone());
    let (y, mom) = layer.forward(g, x, gamma, beta, source, training)?;
    if let (Some(mom), StatSource::CurrentBatch(d)) = (mom, source) {
        layer.update_running_stats(&mom, d);
    }
    Ok((y, gamma, beta))
}
