//! Command-line front end: dataset generation, baseline training,
//! fine-tuning, λ sweeps, evaluation and feature export.
//!
//! Exit status is 0 on success, 1 for usage or validation errors and 2 for
//! I/O failures or corrupt inputs.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod report;
pub mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use bnanchor_core::nn::{DomainTag, Regime, StatSource};
use bnanchor_core::data::Split;
use bnanchor_core::trainer::Construct;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bnanchor", version, about = "Domain expansion experiments: frozen batch-norm statistics and EWC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic O/T dataset pair.
    Generate(GenerateArgs),
    /// Train one of the three baseline constructs.
    Train(TrainArgs),
    /// Fine-tune an O-trained checkpoint on T.
    Finetune(FinetuneArgs),
    /// Fine-tune over a grid of λ values and seeds.
    Sweep(SweepArgs),
    /// Score a checkpoint on one split of one domain.
    Eval(EvalArgs),
    /// Write pooled features and their 2-D PCA projection.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Shift magnitude of the target scanner, in [0, 1].
    #[arg(long)]
    pub shift: f64,
    #[arg(long, default_value_t = bnanchor_core::data::DEFAULT_N_PATIENTS_O)]
    pub n_o: usize,
    #[arg(long, default_value_t = bnanchor_core::data::DEFAULT_N_PATIENTS_T)]
    pub n_t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created; its parent must exist).
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by every training command.
#[derive(Debug, Clone, Args)]
pub struct TrainingOpts {
    /// TOML file with training settings; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// o-only, o-then-t-naive or joint-ot.
    #[arg(long)]
    pub construct: Construct,
    #[command(flatten)]
    pub training: TrainingOpts,
    /// Estimate the Fisher diagonal on O-train with this many samples and
    /// store it, with the anchor, in the checkpoint (o-only only).
    #[arg(long)]
    pub fisher_samples: Option<usize>,
    /// Output directory for `report.csv`, its sidecar and `checkpoint/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneOpts {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// all-layers or bn-only.
    #[arg(long)]
    pub regime: Option<Regime>,
    /// batch-o, batch-t, frozen-o or frozen-t.
    #[arg(long)]
    pub bn_source: Option<StatSource>,
    #[command(flatten)]
    pub training: TrainingOpts,
    /// Compute the Fisher diagonal and anchor from the checkpoint when it
    /// carries none.
    #[arg(long)]
    pub fisher_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub opts: FinetuneOpts,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub opts: FinetuneOpts,
    /// Comma-separated λ values; defaults to the regime's grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Comma-separated seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Parallel runs; defaults to the number of available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub domain: DomainTag,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Statistics source; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub bn_source: Option<StatSource>,
    /// Metrics file (TOML).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "O")]
    pub domain: DomainTag,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub bn_source: Option<StatSource>,
    /// Feature CSV; explained variance goes to the `.meta.toml` sidecar.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
