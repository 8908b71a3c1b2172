//! Plain f64 re-implementation of the classifier used as a test oracle.
//! Shares no code with the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

pub const EPS: f64 = 1e-5;

pub type Params = BTreeMap<String, Vec<f64>>;

/// Per-layer `(mean, var)` used instead of batch moments.
pub type FixedStats = [(Vec<f64>, Vec<f64>); 2];

/// Direct 3×3 cross-correlation with zero padding and floor output size.
pub fn conv(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let q = (j * stride + v) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c_in + c) * h + r as usize) * w + q as usize]
                                    * k[((o * c_in + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((b * c_out + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

fn batch_norm(x: &mut [f64], n: usize, c: usize, inner: usize, gamma: &[f64], beta: &[f64], fixed: Option<&(Vec<f64>, Vec<f64>)>) {
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |b| (0..inner).map(move |k| (b * c + ch) * inner + k));
        let (mean, var) = match fixed {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let m = idx().map(|i| x[i]).sum::<f64>() / (n * inner) as f64;
                let v = idx().map(|i| (x[i] - m).powi(2)).sum::<f64>() / (n * inner) as f64;
                (m, v)
            }
        };
        let inv = 1.0 / (var + EPS).sqrt();
        for i in idx() {
            x[i] = gamma[ch] * (x[i] - mean) * inv + beta[ch];
        }
    }
}

/// Logits `[n,4]` for images `x` (`n·28·28` values).
pub fn logits(p: &Params, x: &[f64], n: usize, fixed: Option<&FixedStats>) -> Vec<f64> {
    let (mut h, h1, w1) = conv(x, (n, 1, 28, 28), &p["conv1.weight"], (8, 3, 3), 1, 1);
    batch_norm(&mut h, n, 8, h1 * w1, &p["bn1.gamma"], &p["bn1.beta"], fixed.map(|f| &f[0]));
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let (mut h, h2, w2) = conv(&h, (n, 8, h1, w1), &p["conv2.weight"], (16, 3, 3), 2, 1);
    batch_norm(&mut h, n, 16, h2 * w2, &p["bn2.gamma"], &p["bn2.beta"], fixed.map(|f| &f[1]));
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let inner = h2 * w2;
    let (wd, bd) = (&p["dense.weight"], &p["dense.bias"]);
    let mut out = vec![0.0; n * 4];
    for b in 0..n {
        for c in 0..16 {
            let f = h[(b * 16 + c) * inner..(b * 16 + c + 1) * inner].iter().sum::<f64>() / inner as f64;
            for k in 0..4 {
                out[b * 4 + k] += f * wd[c * 4 + k];
            }
        }
        for k in 0..4 {
            out[b * 4 + k] += bd[k];
        }
    }
    out
}

/// Mean softmax cross-entropy.
pub fn loss(p: &Params, x: &[f64], labels: &[usize], fixed: Option<&FixedStats>) -> f64 {
    let n = labels.len();
    let z = logits(p, x, n, fixed);
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &z[b * 4..b * 4 + 4];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - row[y];
    }
    total / n as f64
}

pub mod checks;
