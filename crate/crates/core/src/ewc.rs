//! Elastic Weight Consolidation.
//!
//! After training on domain O the parameters are snapshotted (`θ*`) and the
//! diagonal of the empirical Fisher information is estimated from per-example
//! gradients of the log-likelihood of the true label. Fine-tuning on T then
//! minimizes `L_T(θ) + Σᵢ (λ/2)·Fᵢ·(θᵢ − θ*ᵢ)²`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::{Network, ParamMap, ParamMask};
use crate::tensor::Tensor;

pub const DEFAULT_FISHER_SAMPLES: usize = 2000;

/// Parameters at the end of training on domain O.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSnapshot(pub ParamMap);

impl AnchorSnapshot {
    pub fn of(net: &Network) -> Self {
        Self(net.parameters())
    }
}

/// Per-parameter importance weights; every entry is non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal(pub ParamMap);

impl FisherDiagonal {
    /// Mean of squared per-sample gradients. Every gradient map must have
    /// the same keys and shapes.
    pub fn from_gradients<'a>(grads: impl IntoIterator<Item = &'a ParamMap>) -> Result<Self> {
        let mut sums: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        let mut count = 0usize;
        for g in grads {
            if count > 0 && g.len() != sums.len() {
                return Err(Error::State("gradient maps with different keys".into()));
            }
            for (name, t) in g {
                let entry = sums
                    .entry(name.clone())
                    .or_insert_with(|| (t.shape().to_vec(), vec![0.0; t.numel()]));
                if entry.0 != t.shape() {
                    return Err(Error::State(format!("gradient `{name}` changed shape")));
                }
                for (s, &v) in entry.1.iter_mut().zip(t.data()) {
                    *s += v as f64 * v as f64;
                }
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("Fisher estimate needs at least one sample".into()));
        }
        let map = sums
            .into_iter()
            .map(|(name, (shape, s))| {
                let data = s.into_iter().map(|v| (v / count as f64) as f32).collect();
                Ok((name, Tensor::new(&shape, data)?))
            })
            .collect::<Result<ParamMap>>()?;
        Ok(Self(map))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwcConfig {
    pub lambda: f64,
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            fisher_samples: DEFAULT_FISHER_SAMPLES,
        }
    }
}

/// Anchor, Fisher and weight, ready to be added to a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcTerm {
    pub anchor: AnchorSnapshot,
    pub fisher: FisherDiagonal,
    pub lambda: f64,
}

/// Empirical Fisher diagonal of `net` over up to `n_samples` examples of
/// `data`, one example per backward pass, using the network's current
/// statistics source in inference mode. Samples are chosen by a seeded
/// shuffle, so the estimate is a pure function of `(net, data, n, seed)`.
pub fn estimate_fisher(
    net: &Network,
    data: &ImageSet,
    n_samples: usize,
    seed: u64,
) -> Result<FisherDiagonal> {
    if n_samples < 1 {
        return Err(Error::Input("fisher_samples must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Input("Fisher estimate on an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n_samples);
    let mask = ParamMask::all();
    let mut grads = Vec::with_capacity(idx.len());
    for &i in &idx {
        let (x, y) = data.batch(&[i])?;
        let mut pass = net.infer_with_grads(&x, &mask)?;
        let loss = pass.graph.softmax_cross_entropy(pass.logits, &y)?;
        pass.graph.backward(loss)?;
        grads.push(pass.grads());
    }
    FisherDiagonal::from_gradients(&grads)
}

/// `Σᵢ (λ/2)·Fᵢ·(θᵢ − θ*ᵢ)²` over the parameters in `live`, summed in
/// sorted name order.
pub fn ewc_penalty(
    g: &mut Graph,
    live: &BTreeMap<&'static str, Var>,
    anchor: &AnchorSnapshot,
    fisher: &FisherDiagonal,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Input(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut acc: Option<Var> = None;
    for (&name, &theta) in live {
        let a = anchor
            .0
            .get(name)
            .ok_or_else(|| Error::State(format!("anchor has no parameter `{name}`")))?;
        let f = fisher
            .0
            .get(name)
            .ok_or_else(|| Error::State(format!("Fisher has no parameter `{name}`")))?;
        let shape = g.value(theta).shape().to_vec();
        if a.shape() != shape.as_slice() || f.shape() != shape.as_slice() {
            return Err(Error::State(format!(
                "`{name}`: live {shape:?}, anchor {:?}, Fisher {:?}",
                a.shape(),
                f.shape()
            )));
        }
        let a = g.constant(a.clone());
        let f = g.constant(f.clone());
        let diff = g.sub(theta, a)?;
        let sq = g.mul(diff, diff)?;
        let weighted = g.mul(sq, f)?;
        let s = g.sum(weighted);
        acc = Some(match acc {
            None => s,
            Some(prev) => g.add(prev, s)?,
        });
    }
    let sum = match acc {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(sum, (lambda / 2.0) as f32))
}

/// `L_T + penalty`.
pub fn total_loss(g: &mut Graph, task_loss: Var, penalty: Var) -> Result<Var> {
    g.add(task_loss, penalty)
}
