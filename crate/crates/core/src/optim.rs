//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::{Network, ParamMap, ParamMask};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamMap,
    pub v: ParamMap,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: ParamMap::new(),
            v: ParamMap::new(),
            t: 0,
        }
    }

    /// One update of every masked parameter that has a gradient.
    /// Parameters outside the mask are never touched.
    pub fn step(&mut self, net: &mut Network, grads: &ParamMap, mask: &ParamMask) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if !mask.contains(name) {
                continue;
            }
            let p = net
                .param_mut(name)
                .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::State(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((theta, &gi), (mi, vi)) in it {
                let gi = gi as f64;
                let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                *theta -= (c.lr as f64 * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}
