use std::path::Path;

use serde::Serialize;

use bnanchor_core::data::{load_pair, make_domain_pair, save_pair, DomainPair, ImageStyle};
use bnanchor_core::ewc::EwcTerm;
use bnanchor_core::fsio::write_atomic;
use bnanchor_core::metrics::{confusion_matrix, pca_project};
use bnanchor_core::nn::{DomainTag, Network, StatSource};
use bnanchor_core::trainer::{evaluate, finetune, prepare_ewc, run_baseline, Construct, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, CliResult};
use crate::report::{csv_bytes, sidecar_path, toml_bytes, write_run_report, DatasetMeta};
use crate::sweep::{default_lambdas, run_sweep};
use crate::{
    Command, EvalArgs, ExportArgs, FinetuneArgs, FinetuneOpts, GenerateArgs, SweepArgs, TrainArgs,
    TrainingOpts,
};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Finetune(a) => finetune_cmd(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Eval(a) => eval(&a),
        Command::ExportFeatures(a) => export_features(&a),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        std::fs::create_dir(dir)?;
    }
    Ok(())
}

fn dataset_meta(path: &Path, data: &DomainPair) -> DatasetMeta {
    DatasetMeta {
        path: path.display().to_string(),
        shift: data.shift,
        seed: data.seed.to_string(),
    }
}

/// Settings from `--config` (or defaults), overridden by explicit flags.
pub fn training_config(opts: &TrainingOpts) -> CliResult<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(e) = opts.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(p) = opts.patience {
        cfg.patience = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    let pair = make_domain_pair(a.shift, a.n_o, a.n_t, a.seed, &ImageStyle::default())?;
    save_pair(&pair, &a.out)?;
    for d in [&pair.o, &pair.t] {
        let m = bnanchor_core::data::class_marginals(&d.records);
        println!(
            "domain {}: {} patients, {} images, class marginals {:.3} {:.3} {:.3} {:.3}",
            d.domain,
            d.n_patients,
            d.records.len(),
            m[0],
            m[1],
            m[2],
            m[3]
        );
    }
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let data = load_pair(&a.data)?;
    let cfg = training_config(&a.training)?;
    if a.fisher_samples.is_some() && a.construct != Construct::OOnly {
        return Err(CliError::Usage(
            "--fisher-samples only applies to the o-only construct".into(),
        ));
    }
    let run = run_baseline(a.construct, &data, &cfg)?;
    let mut ckpt = Checkpoint::new(run.network, cfg);
    if let Some(n) = a.fisher_samples {
        let term = prepare_ewc(&ckpt.network, &data, 0.0, n, cfg.seed)?;
        ckpt.fisher = Some(term.fisher);
        ckpt.anchor = Some(term.anchor);
    }
    ensure_dir(&a.out)?;
    write_run_report(&a.out, &run.report, &cfg, dataset_meta(&a.data, &data))?;
    ckpt.save(&a.out.join("checkpoint"))?;
    println!(
        "{}: kappa O-test {:.4}, T-test {:.4}, {} epochs (best {})",
        a.construct,
        run.report.test.o,
        run.report.test.t,
        run.report.epochs.len(),
        run.report.best_epoch
    );
    Ok(())
}

struct Prepared {
    ckpt: Checkpoint,
    data: DomainPair,
    cfg: TrainConfig,
}

fn prepare(opts: &FinetuneOpts) -> CliResult<Prepared> {
    let ckpt = Checkpoint::load(&opts.checkpoint)?;
    let data = load_pair(&opts.data)?;
    let mut cfg = training_config(&opts.training)?;
    if let Some(r) = opts.regime {
        cfg.regime = r;
    }
    if let Some(s) = opts.bn_source {
        cfg.bn_source = s;
    }
    Ok(Prepared { ckpt, data, cfg })
}

/// The checkpoint's Fisher and anchor, or freshly estimated ones when
/// `--fisher-samples` is given. Only consulted when some λ is positive.
fn ewc_term(p: &mut Prepared, opts: &FinetuneOpts, needed: bool) -> CliResult<Option<EwcTerm>> {
    if !needed {
        return Ok(None);
    }
    if let (Some(f), Some(a)) = (&p.ckpt.fisher, &p.ckpt.anchor) {
        return Ok(Some(EwcTerm {
            anchor: a.clone(),
            fisher: f.clone(),
            lambda: 0.0,
        }));
    }
    match opts.fisher_samples {
        Some(n) => {
            let term = prepare_ewc(&p.ckpt.network, &p.data, 0.0, n, p.cfg.seed)?;
            p.ckpt.fisher = Some(term.fisher.clone());
            p.ckpt.anchor = Some(term.anchor.clone());
            Ok(Some(term))
        }
        None => Err(CliError::Usage(
            "λ > 0 needs a Fisher diagonal and anchor: use a checkpoint trained with \
             --fisher-samples, or pass --fisher-samples N to estimate them on O-train"
                .into(),
        )),
    }
}

fn finetune_cmd(a: &FinetuneArgs) -> CliResult<()> {
    let mut p = prepare(&a.opts)?;
    if let Some(l) = a.lambda {
        p.cfg.lambda = l;
    }
    p.cfg.validate()?;
    let needed = p.cfg.lambda > 0.0;
    let term = ewc_term(&mut p, &a.opts, needed)?;
    let mut net = p.ckpt.network.clone();
    let report = finetune(&mut net, &p.data, &p.cfg, term.as_ref())?;
    ensure_dir(&a.out)?;
    write_run_report(&a.out, &report, &p.cfg, dataset_meta(&a.opts.data, &p.data))?;
    let out_ckpt = Checkpoint {
        network: net,
        config: p.cfg,
        ..p.ckpt
    };
    out_ckpt.save(&a.out.join("checkpoint"))?;
    let pre = report.pre.expect("fine-tuning reports the starting model");
    println!(
        "finetune {} {} λ={}: kappa O-test {:.4} (was {:.4}), T-test {:.4} (was {:.4}), p={:.3e}",
        p.cfg.regime,
        p.cfg.bn_source,
        p.cfg.lambda,
        report.test.o,
        pre.o,
        report.test.t,
        pre.t,
        report.wilcoxon_o.map(|w| w.p).unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepMeta<'a> {
    regime: String,
    bn_source: String,
    lambdas: &'a [f64],
    seeds: Vec<String>,
    runs: usize,
    failed: usize,
    dataset: DatasetMeta,
    config: &'a TrainConfig,
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    let mut p = prepare(&a.opts)?;
    let lambdas = if a.lambdas.is_empty() {
        default_lambdas(p.cfg.regime)
    } else {
        a.lambdas.clone()
    };
    let seeds = if a.seeds.is_empty() { vec![p.cfg.seed] } else { a.seeds.clone() };
    let term = ewc_term(&mut p, &a.opts, lambdas.iter().any(|&l| l > 0.0))?;
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_sweep(&p.ckpt.network, &p.data, &p.cfg, term.as_ref(), &lambdas, &seeds, jobs)?;

    ensure_dir(&a.out)?;
    let csv_path = a.out.join("sweep.csv");
    write_atomic(&csv_path, &result.csv()?)?;
    write_atomic(&a.out.join("sweep.plot.csv"), &result.plot_csv()?)?;
    let meta = SweepMeta {
        regime: p.cfg.regime.to_string(),
        bn_source: p.cfg.bn_source.to_string(),
        lambdas: &lambdas,
        seeds: seeds.iter().map(u64::to_string).collect(),
        runs: result.rows.len(),
        failed: result.failures(),
        dataset: dataset_meta(&a.opts.data, &p.data),
        config: &p.cfg,
    };
    write_atomic(&sidecar_path(&csv_path), &toml_bytes(&meta)?)?;
    for (l, o, t, n) in result.plot_rows() {
        println!("λ={l}: mean kappa O-test {o:.4}, T-test {t:.4} over {n} runs");
    }
    match result.failures() {
        0 => Ok(()),
        failed => Err(CliError::RunsFailed {
            failed,
            total: result.rows.len(),
        }),
    }
}

fn network_for(ckpt: &Checkpoint, source: Option<StatSource>) -> CliResult<Network> {
    let mut net = ckpt.network.clone();
    if let Some(s) = source {
        net.set_bn_source(s)?;
    }
    Ok(net)
}

#[derive(Serialize)]
struct EvalMeta {
    domain: DomainTag,
    split: String,
    bn_source: String,
    n: usize,
    kappa: f64,
    /// Rows are true classes, columns predictions.
    confusion: Vec<Vec<u64>>,
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_pair(&a.data)?;
    let net = network_for(&ckpt, a.bn_source)?;
    let set = data.domain(a.domain).image_set(a.split);
    let ev = evaluate(&net, &set)?;
    let cm = confusion_matrix(&ev.y_true, &ev.y_pred)?;
    let meta = EvalMeta {
        domain: a.domain,
        split: a.split.to_string(),
        bn_source: net.bn_source().to_string(),
        n: set.len(),
        kappa: ev.kappa,
        confusion: cm.counts.iter().map(|r| r.to_vec()).collect(),
    };
    write_atomic(&a.out, &toml_bytes(&meta)?)?;
    println!("{} {}: kappa {:.6} on {} images", a.domain, a.split, ev.kappa, set.len());
    Ok(())
}

#[derive(Serialize)]
struct ExportMeta {
    domain: DomainTag,
    split: String,
    bn_source: String,
    n: usize,
    explained_variance: Vec<f64>,
    rank_deficient: bool,
}

const FEATURE_CHUNK: usize = 256;

fn export_features(a: &ExportArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_pair(&a.data)?;
    let net = network_for(&ckpt, a.bn_source)?;
    let domain = data.domain(a.domain);
    let set = domain.image_set(a.split);
    let patients: Vec<u32> = domain.records_in(a.split).map(|r| r.patient_id).collect();
    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(set.len());
    for chunk in set.chunks(FEATURE_CHUNK) {
        let (x, _) = chunk?;
        let f = net.features(&x)?;
        let width = f.shape()[1];
        feats.extend(f.data().chunks(width).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    let pca = pca_project(&feats, 2)?;
    let width = feats.first().map_or(0, Vec::len);
    let mut header: Vec<String> = ["index", "patient_id", "label", "pc1", "pc2"].map(String::from).to_vec();
    header.extend((0..width).map(|j| format!("f{j}")));
    let rows: Vec<Vec<String>> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let proj = &pca.projection[i];
            let mut row = vec![
                i.to_string(),
                patients[i].to_string(),
                set.labels[i].to_string(),
                proj.first().copied().unwrap_or(0.0).to_string(),
                proj.get(1).copied().unwrap_or(0.0).to_string(),
            ];
            row.extend(f.iter().map(|v| v.to_string()));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_atomic(&a.out, &csv_bytes(&header_refs, &rows)?)?;
    let meta = ExportMeta {
        domain: a.domain,
        split: a.split.to_string(),
        bn_source: net.bn_source().to_string(),
        n: feats.len(),
        explained_variance: pca.explained.clone(),
        rank_deficient: pca.rank_deficient,
    };
    write_atomic(&sidecar_path(&a.out), &toml_bytes(&meta)?)?;
    println!(
        "{} features of {} images, explained variance {:?}",
        width,
        feats.len(),
        pca.explained
    );
    Ok(())
}
