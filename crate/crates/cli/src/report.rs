//! CSV reports with a TOML sidecar carrying run metadata.
//!
//! Floats are written in Rust's shortest round-trip form, so identical
//! runs produce identical bytes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use bnanchor_core::fsio::write_atomic;
use bnanchor_core::trainer::{RunKind, RunReport, TrainConfig};
use bnanchor_core::Error;

use crate::error::CliResult;

pub const RUN_HEADER: [&str; 9] = [
    "row",
    "epoch",
    "train_loss",
    "val_kappa",
    "kappa_o_test",
    "kappa_t_test",
    "pre_kappa_o_test",
    "pre_kappa_t_test",
    "wilcoxon_p_o",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes rows of string cells under `header`.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::State(format!("csv buffer: {e}")).into())
}

/// One row per epoch followed by one summary row.
pub fn run_report_csv(report: &RunReport) -> CliResult<Vec<u8>> {
    let mut rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| {
            vec![
                "epoch".into(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                opt(e.val_kappa),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]
        })
        .collect();
    let best_val = report.epochs.get(report.best_epoch.wrapping_sub(1)).and_then(|e| e.val_kappa);
    rows.push(vec![
        "summary".into(),
        report.best_epoch.to_string(),
        String::new(),
        opt(best_val),
        report.test.o.to_string(),
        report.test.t.to_string(),
        opt(report.pre.map(|p| p.o)),
        opt(report.pre.map(|p| p.t)),
        opt(report.wilcoxon_o.map(|w| w.p)),
    ]);
    csv_bytes(&RUN_HEADER, &rows)
}

#[derive(Debug, Serialize)]
pub struct RunMeta<'a> {
    pub kind: RunKind,
    pub regime: String,
    pub bn_source: String,
    pub lambda: f64,
    pub seed: String,
    pub epochs_ran: usize,
    pub best_epoch: usize,
    pub dataset: DatasetMeta,
    pub config: &'a TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetMeta {
    pub path: String,
    pub shift: f64,
    pub seed: String,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.toml")
}

pub fn toml_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    Ok(toml::to_string(value)
        .map_err(|e| Error::State(format!("cannot encode metadata: {e}")))?
        .into_bytes())
}

/// Writes `report.csv` and `report.meta.toml` into `dir`.
pub fn write_run_report(dir: &Path, report: &RunReport, config: &TrainConfig, dataset: DatasetMeta) -> CliResult<()> {
    let csv_path = dir.join("report.csv");
    write_atomic(&csv_path, &run_report_csv(report)?)?;
    let meta = RunMeta {
        kind: report.kind,
        regime: report.regime.to_string(),
        bn_source: report.bn_source.to_string(),
        lambda: report.lambda,
        seed: report.seed.to_string(),
        epochs_ran: report.epochs.len(),
        best_epoch: report.best_epoch,
        dataset,
        config,
    };
    write_atomic(&sidecar_path(&csv_path), &toml_bytes(&meta)?)?;
    Ok(())
}
