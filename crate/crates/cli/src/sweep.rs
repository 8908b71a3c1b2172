//! λ sweeps: one fine-tuning run per (λ, seed), executed in parallel on
//! isolated copies of the starting network.

use std::collections::BTreeMap;

use rayon::prelude::*;

use bnanchor_core::data::DomainPair;
use bnanchor_core::ewc::EwcTerm;
use bnanchor_core::nn::{Network, Regime, StatSource};
use bnanchor_core::trainer::{finetune, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::report::csv_bytes;

pub const BN_ONLY_LAMBDAS: [f64; 6] = [0.0, 0.0125, 0.025, 0.05, 0.1, 0.2];
pub const ALL_LAYERS_LAMBDAS: [f64; 7] = [0.0, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5];

pub fn default_lambdas(regime: Regime) -> Vec<f64> {
    match regime {
        Regime::BNOnly => BN_ONLY_LAMBDAS.to_vec(),
        Regime::AllLayers => ALL_LAYERS_LAMBDAS.to_vec(),
    }
}

pub const SWEEP_HEADER: [&str; 10] = [
    "lambda",
    "regime",
    "bn_source",
    "kappa_o_test",
    "kappa_t_test",
    "p_vs_baseline_o",
    "seed",
    "epochs_ran",
    "status",
    "message",
];

pub const PLOT_HEADER: [&str; 4] = ["lambda", "mean_kappa_o_test", "mean_kappa_t_test", "runs"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub regime: Regime,
    pub bn_source: StatSource,
    pub seed: u64,
    pub outcome: Result<SweepPoint, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub kappa_o: f64,
    pub kappa_t: f64,
    pub p_vs_baseline_o: f64,
    pub epochs_ran: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Sorted by `(λ, seed)`.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn csv(&self) -> CliResult<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.lambda.to_string(), r.regime.to_string(), r.bn_source.to_string()];
                match &r.outcome {
                    Ok(p) => cells.extend([
                        p.kappa_o.to_string(),
                        p.kappa_t.to_string(),
                        p.p_vs_baseline_o.to_string(),
                        r.seed.to_string(),
                        p.epochs_ran.to_string(),
                        "ok".into(),
                        String::new(),
                    ]),
                    Err(msg) => cells.extend([
                        String::new(),
                        String::new(),
                        String::new(),
                        r.seed.to_string(),
                        String::new(),
                        "failed".into(),
                        msg.clone(),
                    ]),
                }
                cells
            })
            .collect();
        csv_bytes(&SWEEP_HEADER, &rows)
    }

    /// Mean test κ per λ over the successful runs: the two curves of a
    /// λ-versus-κ plot.
    pub fn plot_rows(&self) -> Vec<(f64, f64, f64, usize)> {
        let mut by_lambda: BTreeMap<u64, (f64, f64, f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            if let Ok(p) = &r.outcome {
                // λ ≥ 0, so the bit pattern orders like the value
                let e = by_lambda.entry(r.lambda.to_bits()).or_insert((r.lambda, 0.0, 0.0, 0));
                e.1 += p.kappa_o;
                e.2 += p.kappa_t;
                e.3 += 1;
            }
        }
        by_lambda
            .into_values()
            .map(|(l, o, t, n)| (l, o / n as f64, t / n as f64, n))
            .collect()
    }

    pub fn plot_csv(&self) -> CliResult<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .plot_rows()
            .into_iter()
            .map(|(l, o, t, n)| vec![l.to_string(), o.to_string(), t.to_string(), n.to_string()])
            .collect();
        csv_bytes(&PLOT_HEADER, &rows)
    }
}

/// Runs `finetune` for every (λ, seed) on `jobs` worker threads. Failed
/// runs become rows with their error message instead of aborting the sweep.
pub fn run_sweep(
    start: &Network,
    data: &DomainPair,
    base: &TrainConfig,
    ewc: Option<&EwcTerm>,
    lambdas: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> CliResult<SweepResult> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("a sweep needs at least one λ and one seed".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(CliError::Usage(format!("λ values must be finite and non-negative, got {l}")));
    }
    let mut points: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    points.dedup();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let rows = pool.install(|| {
        points
            .par_iter()
            .map(|&(lambda, seed)| {
                let cfg = TrainConfig { lambda, seed, ..*base };
                let mut net = start.clone();
                let outcome = finetune(&mut net, data, &cfg, ewc)
                    .map(|r| SweepPoint {
                        kappa_o: r.test.o,
                        kappa_t: r.test.t,
                        p_vs_baseline_o: r.wilcoxon_o.map(|w| w.p).unwrap_or(f64::NAN),
                        epochs_ran: r.epochs.len(),
                    })
                    .map_err(|e| e.to_string());
                SweepRow {
                    lambda,
                    regime: cfg.regime,
                    bn_source: cfg.bn_source,
                    seed,
                    outcome,
                }
            })
            .collect()
    });
    Ok(SweepResult { rows })
}
