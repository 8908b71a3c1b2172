//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node appended after its parents,
//! so creation order is a topological order and [`Graph::backward`] simply
//! walks the tape in reverse. Leaves created with [`Graph::param`] collect
//! gradients; leaves created with [`Graph::constant`] do not, and subgraphs
//! that only depend on constants are skipped during the backward sweep.
//!
//! Leaf gradients accumulate across calls to `backward` until
//! [`Graph::zero_grads`] is called.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv_geometry, gemm_nn, gemm_nt, gemm_tn, matmul_dims, ConvGeometry, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Equal,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geo: ConvGeometry,
        batch: usize,
    },
    Relu(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f32),
    Sum(Var),
    AddRowBias(Var, Var),
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input x̂.
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Whether the statistics came from this batch (and must be
        /// differentiated through) or are fixed constants.
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics produced by a batch-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    /// Population (biased) variance.
    pub var: Vec<f32>,
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulated gradient of a leaf; zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.leaf_grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x` (`[C,H,W]` or a batch `[N,C,H,W]`) with
    /// `kernel[Cout,Cin,kh,kw]`. The output size must be exact.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_impl(x, kernel, stride, pad, true)
    }

    /// Like [`Graph::conv2d`] but rounds the output size down, ignoring
    /// input that does not fill a whole stride.
    pub fn conv2d_floor(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_impl(x, kernel, stride, pad, false)
    }

    fn conv2d_impl(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        exact: bool,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (batch, c, h, w, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            s => return shape_err(format!("conv2d input must be [C,H,W] or [N,C,H,W], got {s:?}")),
        };
        let geo = conv_geometry(c, h, w, self.value(kernel).shape(), stride, pad, exact)?;
        let per_in = c * h * w;
        let per_out = geo.c_out * geo.out_hw();
        let mut out = vec![0.0f32; batch * per_out];
        let mut cols = vec![0.0f32; geo.patch_len() * geo.out_hw()];
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            for i in 0..batch {
                geo.im2col(&xd[i * per_in..(i + 1) * per_in], &mut cols);
                gemm_nn(
                    geo.c_out,
                    geo.patch_len(),
                    geo.out_hw(),
                    kd,
                    &cols,
                    &mut out[i * per_out..(i + 1) * per_out],
                );
            }
        }
        let shape: Vec<usize> = if batched {
            vec![batch, geo.c_out, geo.h_out, geo.w_out]
        } else {
            vec![geo.c_out, geo.h_out, geo.w_out]
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                geo,
                batch,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    fn broadcast(&self, a: Var, b: Var, what: &str) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() {
            Ok(Broadcast::Equal)
        } else if sb.is_scalar() {
            Ok(Broadcast::RightScalar)
        } else if sa.is_scalar() {
            Ok(Broadcast::LeftScalar)
        } else {
            shape_err(format!("{what} of {:?} and {:?}", sa.shape(), sb.shape()))
        }
    }

    fn binary(&mut self, a: Var, b: Var, bc: Broadcast, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        match bc {
            Broadcast::Equal => Tensor::new(
                ta.shape(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
            .expect("equal shapes"),
            Broadcast::RightScalar => {
                let y = tb.data()[0];
                ta.map(|x| f(x, y))
            }
            Broadcast::LeftScalar => {
                let x = ta.data()[0];
                tb.map(|y| f(x, y))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b, "add")?;
        let value = self.binary(a, b, bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b, "sub")?;
        let value = self.binary(a, b, bc, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b, "mul")?;
        let value = self.binary(a, b, bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b, bc), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        // f64 accumulator keeps long sums order-stable
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    /// `x[n,m] + bias[m]`, the bias repeated on every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        let m = match (xs, bs) {
            ([_, m], [mb]) if m == mb => *m,
            _ => return shape_err(format!("row bias {bs:?} on {xs:?}")),
        };
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// Mean over the spatial dimensions: `[n,C,H,W] → [n,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = match self.value(x).shape() {
            [n, c, h, w] => (*n, *c, h * w),
            s => return shape_err(format!("global_avg_pool expects [N,C,H,W], got {s:?}")),
        };
        let xd = self.value(x).data();
        let out: Vec<f32> = xd
            .chunks(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return shape_err(format!("batch norm expects [N,C,...], got {xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return shape_err(format!(
                    "{name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                ));
            }
        }
        Ok((n, c, inner))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: Vec<f32>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for k in off..off + inner {
                    let h = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Batch normalization with statistics computed from this batch over
    /// the `N·H·W` positions of each channel. Gradients flow through the
    /// batch mean and variance. Returns the moments so callers can update
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchMoments)> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let m = n * inner;
        if m < 2 {
            return Err(Error::Input(format!(
                "batch statistics need at least 2 values per channel, got {m}"
            )));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * inner;
                s += xd[off..off + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * inner;
                ss += xd[off..off + inner]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (ss / m as f64) as f32;
        }
        let inv_std = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchMoments { mean, var }))
    }

    /// Batch normalization with fixed statistics; each sample is normalized
    /// independently of the rest of the batch and the statistics receive no
    /// gradient.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return shape_err(format!(
                "statistics of length {}/{} for {c} channels",
                mean.len(),
                var.len()
            ));
        }
        let inv_std = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] => (*n, *k),
            s => return shape_err(format!("logits must be [n,K], got {s:?}")),
        };
        if labels.len() != n {
            return Err(Error::Input(format!(
                "{} labels for {n} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range 0..{k}")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = ((row[j] as f64 - mx).exp() / z) as f32;
            }
            total += z.ln() + mx - row[labels[i]] as f64;
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, adding dL/dθ into every
    /// trainable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Input(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]).expect("scalar"));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut adj)?;
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_scalar(g: &Tensor) -> Tensor {
        let s: f64 = g.data().iter().map(|&v| v as f64).sum();
        Tensor::scalar(s as f32)
    }

    fn propagate(&mut self, i: usize, g: Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), self.value(b).data(), &mut ga);
                    self.accumulate(adj, a, Tensor::new(&[m, k], ga)?);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(k, m, n, self.value(a).data(), g.data(), &mut gb);
                    self.accumulate(adj, b, Tensor::new(&[k, n], gb)?);
                }
            }
            &Op::Conv2d {
                x,
                kernel,
                geo,
                batch,
            } => {
                let (want_x, want_k) = (self.rg(x), self.rg(kernel));
                let per_in = geo.c_in * geo.h * geo.w;
                let per_out = geo.c_out * geo.out_hw();
                let (pl, ohw) = (geo.patch_len(), geo.out_hw());
                let mut gk = vec![0.0f32; geo.c_out * pl];
                let mut gx = vec![0.0f32; if want_x { batch * per_in } else { 0 }];
                let mut cols = vec![0.0f32; pl * ohw];
                let mut gcols = vec![0.0f32; pl * ohw];
                let xd = self.value(x).data();
                let kd = self.value(kernel).data();
                for s in 0..batch {
                    let gy = &g.data()[s * per_out..(s + 1) * per_out];
                    if want_k {
                        geo.im2col(&xd[s * per_in..(s + 1) * per_in], &mut cols);
                        gemm_nt(geo.c_out, ohw, pl, gy, &cols, &mut gk);
                    }
                    if want_x {
                        gcols.fill(0.0);
                        gemm_tn(pl, geo.c_out, ohw, kd, gy, &mut gcols);
                        geo.col2im(&gcols, &mut gx[s * per_in..(s + 1) * per_in]);
                    }
                }
                if want_k {
                    let ks = self.value(kernel).shape().to_vec();
                    self.accumulate(adj, kernel, Tensor::new(&ks, gk)?);
                }
                if want_x {
                    let xs = self.value(x).shape().to_vec();
                    self.accumulate(adj, x, Tensor::new(&xs, gx)?);
                }
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                let t = Tensor::new(g.shape(), data)?;
                self.accumulate(adj, x, t);
            }
            &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let gb = g.map(|v| sign * v);
                match bc {
                    Broadcast::Equal => {
                        self.accumulate(adj, b, gb);
                        self.accumulate(adj, a, g);
                    }
                    Broadcast::RightScalar => {
                        self.accumulate(adj, b, Self::reduce_scalar(&gb).reshape(self.value(b).shape())?);
                        self.accumulate(adj, a, g);
                    }
                    Broadcast::LeftScalar => {
                        self.accumulate(adj, a, Self::reduce_scalar(&g).reshape(self.value(a).shape())?);
                        self.accumulate(adj, b, gb);
                    }
                }
            }
            &Op::Mul(a, b, bc) => {
                let (va, vb) = (self.value(a), self.value(b));
                match bc {
                    Broadcast::Equal => {
                        let ga = Tensor::new(
                            g.shape(),
                            g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                        )?;
                        let gb = Tensor::new(
                            g.shape(),
                            g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                        )?;
                        self.accumulate(adj, a, ga);
                        self.accumulate(adj, b, gb);
                    }
                    Broadcast::RightScalar | Broadcast::LeftScalar => {
                        let (big, small) = if bc == Broadcast::RightScalar { (a, b) } else { (b, a) };
                        let sv = self.value(small).data()[0];
                        let dsmall: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(big).data())
                            .map(|(&x, &y)| x as f64 * y as f64)
                            .sum();
                        let sshape = self.value(small).shape().to_vec();
                        self.accumulate(adj, big, g.map(|v| v * sv));
                        self.accumulate(adj, small, Tensor::new(&sshape, vec![dsmall as f32])?);
                    }
                }
            }
            &Op::Scale(a, f) => self.accumulate(adj, a, g.map(|v| v * f)),
            &Op::Sum(a) => {
                let gv = g.data()[0];
                let t = Tensor::full(self.value(a).shape(), gv);
                self.accumulate(adj, a, t);
            }
            &Op::AddRowBias(x, bias) => {
                let m = self.value(bias).numel();
                if self.rg(bias) {
                    let mut gb = vec![0.0f32; m];
                    for row in g.data().chunks(m) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    self.accumulate(adj, bias, Tensor::new(&[m], gb)?);
                }
                self.accumulate(adj, x, g);
            }
            &Op::GlobalAvgPool(x) => {
                let xs = self.value(x).shape().to_vec();
                let hw = xs[2] * xs[3];
                let mut data = Vec::with_capacity(hw * g.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / hw as f32, hw));
                }
                self.accumulate(adj, x, Tensor::new(&xs, data)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta, batch_stats) = (*x, *gamma, *beta, *batch_stats);
                let xs = self.value(x).shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = (n * inner) as f64;
                let gd = g.data();
                let gam = self.value(gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for k in off..off + inner {
                            dgamma[ch] += gd[k] as f64 * xhat[k] as f64;
                            dbeta[ch] += gd[k] as f64;
                        }
                    }
                }
                let gx = if self.rg(x) {
                    let mut gx = vec![0.0f32; gd.len()];
                    for ch in 0..c {
                        let gm = gam[ch] as f64;
                        let is = inv_std[ch] as f64;
                        // sums of dx̂ and dx̂·x̂ over the channel
                        let (sum_dh, sum_dh_h) = (gm * dbeta[ch], gm * dgamma[ch]);
                        for s in 0..n {
                            let off = (s * c + ch) * inner;
                            for k in off..off + inner {
                                let dh = gd[k] as f64 * gm;
                                gx[k] = if batch_stats {
                                    (is / m * (m * dh - sum_dh - xhat[k] as f64 * sum_dh_h)) as f32
                                } else {
                                    (dh * is) as f32
                                };
                            }
                        }
                    }
                    Some(Tensor::new(&xs, gx)?)
                } else {
                    None
                };
                let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(|x| x as f32).collect());
                let (tg, tb) = (to_t(dgamma)?, to_t(dbeta)?);
                self.accumulate(adj, gamma, tg);
                self.accumulate(adj, beta, tb);
                if let Some(gx) = gx {
                    self.accumulate(adj, x, gx);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let k = self.value(logits).shape()[1];
                let n = labels.len();
                let scale = g.data()[0] / n as f32;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                let shape = self.value(logits).shape().to_vec();
                self.accumulate(adj, logits, Tensor::new(&shape, d)?);
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` at `theta`:
/// `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let up = f(&point);
        point[i] = theta[i] - h;
        let down = f(&point);
        point[i] = theta[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
