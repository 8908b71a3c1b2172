//! Numerical checks shared by the oracle tests and the acceptance suite.
//! Each returns a short summary on success and a description of the first
//! violation on failure.

use bnanchor_core::autodiff::{finite_diff_gradient, Graph};
use bnanchor_core::data::{bit_depth_normalize, make_domain_pair, ImageSet, ImageStyle, Split};
use bnanchor_core::ewc::{estimate_fisher, ewc_penalty, AnchorSnapshot, FisherDiagonal};
use bnanchor_core::metrics::{kappa_from_labels, wilcoxon_signed_rank, WilcoxonMethod};
use bnanchor_core::nn::{DomainTag, Network, ParamMap, ParamMask, RunningStats, StatSource};
use bnanchor_core::optim::{AdamConfig, AdamState};
use bnanchor_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use super::{FixedStats, Params};

/// Relative error denominator floor for gradient comparisons.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Central-difference step on the f64 reference. Larger steps straddle
/// relu kinks often enough to matter.
pub const FD_STEP: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn to_f64(m: &ParamMap) -> Params {
    m.iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

fn random_network(rng: &mut ChaCha8Rng) -> Network {
    let mut net = Network::new(rng);
    let mut params = net.parameters();
    for (name, t) in params.iter_mut() {
        if name.contains("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.contains("beta") || name.contains("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    net.load_parameters(&params).expect("same shapes");
    net
}

/// Autodiff gradients of the full classifier loss against central
/// differences of the f64 reference, on `instances` random networks,
/// batches and coordinates. Every fourth instance normalizes with fixed
/// statistics instead of batch moments.
pub fn network_gradients(instances: u64, coords_per_instance: usize) -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let mut net = random_network(&mut rng);
        let n = 3;
        let x: Vec<f32> = (0..n * 784).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let fixed = inst % 4 == 3;
        let stats: Option<FixedStats> = fixed.then(|| {
            let layer = |c: usize, rng: &mut ChaCha8Rng| {
                let m: Vec<f32> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();
                let v: Vec<f32> = (0..c).map(|_| rng.random_range(0.05..0.5)).collect();
                (m, v)
            };
            let (m1, v1) = layer(8, &mut rng);
            let (m2, v2) = layer(16, &mut rng);
            for ((_, bn), (m, v)) in net.bn_layers_mut().into_iter().zip([(&m1, &v1), (&m2, &v2)]) {
                bn.set_running_stats(DomainTag::O, RunningStats { mean: m.clone(), var: v.clone() })
                    .expect("valid stats");
            }
            let up = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
            [(up(&m1), up(&v1)), (up(&m2), up(&v2))]
        });
        if fixed {
            net.set_bn_source(StatSource::FrozenGlobal(DomainTag::O)).map_err(|e| e.to_string())?;
        }
        let batch = Tensor::new(&[n, 1, 28, 28], x.clone()).map_err(|e| e.to_string())?;
        let mut pass = net.forward(&batch, true, &ParamMask::all()).map_err(|e| e.to_string())?;
        let loss = pass.graph.softmax_cross_entropy(pass.logits, &labels).map_err(|e| e.to_string())?;
        pass.graph.backward(loss).map_err(|e| e.to_string())?;
        let grads = pass.grads();

        let base = to_f64(&net.parameters());
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let ref_logits = super::logits(&base, &xs, n, stats.as_ref());
        for (a, b) in pass.logits().data().iter().zip(&ref_logits) {
            if (*a as f64 - b).abs() > 1e-4 {
                return Err(format!("instance {inst}: logits differ, {a} vs {b}"));
            }
        }
        let names: Vec<&String> = base.keys().collect();
        for _ in 0..coords_per_instance {
            let name = names[rng.random_range(0..names.len())].clone();
            let idx = rng.random_range(0..base[&name].len());
            let f = |t: &[f64]| {
                let mut p = base.clone();
                p.get_mut(&name).unwrap()[idx] = t[0];
                super::loss(&p, &xs, &labels, stats.as_ref())
            };
            let fd = finite_diff_gradient(f, &[base[&name][idx]], FD_STEP).map_err(|e| e.to_string())?[0];
            let ad = grads[&name].data()[idx] as f64;
            let e = rel_err(ad, fd);
            if e >= 1e-3 {
                return Err(format!("instance {inst}: {name}[{idx}] autodiff {ad:e} vs difference {fd:e} (rel {e:e})"));
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(format!("{instances} instances, {checked} coordinates, worst rel err {worst:.2e}"))
}

/// Library convolution (floor output size) against the reference loop on
/// random geometries.
pub fn conv_vs_loop(cases: u64) -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..cases {
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let (stride, pad) = (rng.random_range(1..4), rng.random_range(0..2));
        let (h, w) = (rng.random_range(k..10), rng.random_range(k..10));
        let x: Vec<f32> = (0..n * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kern: Vec<f32> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[n, ci, h, w], x.clone()).unwrap());
        let kv = g.constant(Tensor::new(&[co, ci, k, k], kern.clone()).unwrap());
        let y = g.conv2d_floor(xv, kv, stride, pad).map_err(|e| format!("case {case}: {e}"))?;
        let up = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let (want, ho, wo) = super::conv(&up(&x), (n, ci, h, w), &up(&kern), (co, k, k), stride, pad);
        if g.value(y).shape() != [n, co, ho, wo] {
            return Err(format!("case {case}: shape {:?} vs [{n},{co},{ho},{wo}]", g.value(y).shape()));
        }
        for (a, b) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
        if worst > 1e-5 {
            return Err(format!("case {case}: max abs diff {worst:e}"));
        }
    }
    Ok(format!("{cases} geometries, max abs diff {worst:.2e}"))
}

pub fn reversed_kappa() -> Result<String, String> {
    let k = kappa_from_labels(&[0, 1, 2, 3], &[3, 2, 1, 0]).map_err(|e| e.to_string())?.kappa;
    if (k + 0.6).abs() <= 1e-12 {
        Ok(format!("kappa {k}"))
    } else {
        Err(format!("kappa {k}, expected -0.6"))
    }
}

/// Two-sided p-value by enumerating every sign assignment of the midranks.
pub fn enumerated_wilcoxon_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let same = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (same + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let w = plus.min(total - plus);
    let hits = (0u32..1 << n)
        .filter(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum::<f64>() <= w + 1e-9)
        .count();
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

pub fn wilcoxon_exact(cases: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let want = enumerated_wilcoxon_p(&a, &b);
        let got = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
        if got.n_effective > 0 && got.method != WilcoxonMethod::Exact {
            return Err(format!("case {case}: n={n} did not use the exact method"));
        }
        if (got.p - want).abs() > 1e-12 {
            return Err(format!("case {case}: p {} vs enumeration {want} for {a:?} / {b:?}", got.p));
        }
    }
    Ok(format!("{cases} cases with n <= 12"))
}

fn penalty_value(theta: &ParamMap, anchor: &AnchorSnapshot, fisher: &FisherDiagonal, lambda: f64) -> Result<(f64, ParamMap), String> {
    let mut g = Graph::new();
    let mut live = BTreeMap::new();
    let mut keys: Vec<&'static str> = Vec::new();
    for (name, t) in theta {
        let key: &'static str = Box::leak(name.clone().into_boxed_str());
        keys.push(key);
        live.insert(key, g.param(t.clone()));
    }
    let p = ewc_penalty(&mut g, &live, anchor, fisher, lambda).map_err(|e| e.to_string())?;
    let value = g.value(p).item().map_err(|e| e.to_string())? as f64;
    g.backward(p).map_err(|e| e.to_string())?;
    let grads = keys.iter().map(|k| (k.to_string(), g.grad(live[k]))).collect();
    Ok((value, grads))
}

/// Penalty vanishes at the anchor, scales exactly with λ, and its gradient
/// matches `λ·F·(θ−θ*)` and central differences of the closed form.
pub fn ewc_properties(cases: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let shapes: [(&str, usize); 2] = [("a", rng.random_range(1..6)), ("b", rng.random_range(1..6))];
        let mut draw = |lo: f32, hi: f32| -> ParamMap {
            shapes
                .iter()
                .map(|&(k, n)| (k.to_string(), Tensor::new(&[n], (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()))
                .collect()
        };
        let theta = draw(-2.0, 2.0);
        let anchor = AnchorSnapshot(draw(-2.0, 2.0));
        let fisher = FisherDiagonal(draw(0.0, 3.0));
        let lambda = 2f64.powi(rng.random_range(-4..8));

        let (at_anchor, _) = penalty_value(&anchor.0, &anchor, &fisher, lambda)?;
        if at_anchor != 0.0 {
            return Err(format!("case {case}: penalty at anchor {at_anchor}"));
        }
        let (p1, grads) = penalty_value(&theta, &anchor, &fisher, lambda)?;
        let (p2, _) = penalty_value(&theta, &anchor, &fisher, 2.0 * lambda)?;
        let (p0, _) = penalty_value(&theta, &anchor, &fisher, 0.0)?;
        if p2 != 2.0 * p1 || p0 != 0.0 {
            return Err(format!("case {case}: λ-linearity broken ({p1}, {p2}, {p0})"));
        }
        for (name, t) in &theta {
            let (a, f) = (anchor.0[name].data(), fisher.0[name].data());
            for (i, &th) in t.data().iter().enumerate() {
                let closed = lambda * f[i] as f64 * (th as f64 - a[i] as f64);
                let fd = finite_diff_gradient(|v| lambda / 2.0 * f[i] as f64 * (v[0] - a[i] as f64).powi(2), &[th as f64], 1e-4)
                    .map_err(|e| e.to_string())?[0];
                let got = grads[name].data()[i] as f64;
                let e = rel_err(got, closed).max(rel_err(got, fd));
                if e >= 1e-3 {
                    return Err(format!("case {case}: {name}[{i}] gradient {got} vs {closed} / {fd}"));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(format!("{cases} cases, worst gradient rel err {worst:.2e}"))
}

/// Fisher diagonals of random networks on generated images are finite and
/// non-negative, and equal the mean of squared per-sample gradients.
pub fn fisher_nonnegative(cases: u64) -> Result<String, String> {
    let pair = make_domain_pair(0.3, 16, 10, 5, &ImageStyle::default()).map_err(|e| e.to_string())?;
    let set: ImageSet = pair.domain(DomainTag::O).image_set(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..cases {
        let mut net = random_network(&mut rng);
        net.forward(&set.batch(&(0..set.len()).collect::<Vec<_>>()).unwrap().0, true, &ParamMask::none())
            .map_err(|e| e.to_string())?;
        net.set_bn_source(StatSource::FrozenGlobal(DomainTag::O)).map_err(|e| e.to_string())?;
        let k = 4;
        let fisher = estimate_fisher(&net, &set, k, case).map_err(|e| e.to_string())?;
        if let Some((name, _)) = fisher.0.iter().find(|(_, t)| t.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite())) {
            return Err(format!("case {case}: negative or non-finite Fisher entry in {name}"));
        }
        let total: f64 = fisher.0.values().flat_map(|t| t.data().iter()).map(|&v| v as f64).sum();
        if total <= 0.0 {
            return Err(format!("case {case}: Fisher is identically zero"));
        }
    }
    Ok(format!("{cases} networks"))
}

/// First Adam step moves each coordinate by lr (within 1%) for gradients
/// spanning several orders of magnitude.
pub fn adam_first_step() -> Result<String, String> {
    let mut worst = 0.0f64;
    for g in [1e-4f32, 3e-3, 0.3, -7.0, 250.0] {
        let mut net = Network::new(&mut ChaCha8Rng::seed_from_u64(3));
        let before = net.parameters();
        let grads: ParamMap = before.iter().map(|(k, t)| (k.clone(), t.map(|_| g))).collect();
        let lr = 1e-3;
        let mut opt = AdamState::new(AdamConfig { lr, ..AdamConfig::default() });
        opt.step(&mut net, &grads, &ParamMask::all()).map_err(|e| e.to_string())?;
        for (name, t) in net.parameters() {
            for (a, b) in t.data().iter().zip(before[&name].data()) {
                let moved = (*a as f64 - *b as f64).abs();
                let dev = (moved / lr as f64 - 1.0).abs();
                worst = worst.max(dev);
                if dev > 0.01 {
                    return Err(format!("g={g}: {name} moved {moved:e}, lr {lr}"));
                }
            }
        }
    }
    Ok(format!("worst deviation {:.2}%", worst * 100.0))
}

pub fn bit_depth_fixed_points() -> Result<String, String> {
    let twelve = bit_depth_normalize(&[0, 4095], 12).map_err(|e| e.to_string())?;
    let fourteen = bit_depth_normalize(&[0, 16383], 14).map_err(|e| e.to_string())?;
    if twelve == [0.0, 1.0] && fourteen == [0.0, 1.0] {
        Ok("4095@12 and 16383@14 map to 1.0".into())
    } else {
        Err(format!("got {twelve:?} and {fourteen:?}"))
    }
}
