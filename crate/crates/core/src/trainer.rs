//! Training loop, early stopping, the three baseline constructs and the
//! fine-tuning procedure (regime × statistics source × EWC weight).

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainPair, ImageSet, Split};
use crate::error::{Error, Result};
use crate::ewc::{estimate_fisher, ewc_penalty, total_loss, EwcTerm, DEFAULT_FISHER_SAMPLES};
use crate::metrics::{kappa_from_labels, per_sample_agreement, wilcoxon_signed_rank, WilcoxonResult};
use crate::nn::{trainable_parameters, DomainTag, Network, Regime, StatSource};
use crate::optim::{AdamConfig, AdamState, DEFAULT_LR};

/// Fine-tuning takes small steps so that the starting model is perturbed
/// rather than retrained.
pub const DEFAULT_FINETUNE_LR: f32 = 3e-5;

/// Images per inference chunk during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Adam step size when training from scratch.
    pub lr: f32,
    /// Adam step size when fine-tuning an O-trained model on T.
    pub finetune_lr: f32,
    pub lambda: f64,
    pub regime: Regime,
    pub bn_source: StatSource,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub fisher_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 60,
            patience: 20,
            seed: 0,
            lr: DEFAULT_LR,
            finetune_lr: DEFAULT_FINETUNE_LR,
            lambda: 0.0,
            regime: Regime::AllLayers,
            bn_source: StatSource::CurrentBatch(DomainTag::O),
            eval_every: 1,
            fisher_samples: DEFAULT_FISHER_SAMPLES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        for (name, lr) in [("lr", self.lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {lr}"));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.fisher_samples < 1 {
            return bad("fisher_samples must be at least 1".into());
        }
        Ok(())
    }
}

/// Independent seed for one named phase of a run.
pub fn derive_seed(seed: u64, phase: &str) -> u64 {
    // FNV-1a over the phase name, then a splitmix64 round
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in phase.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tracks the best validation κ and the network that achieved it.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub best_checkpoint: Option<Network>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_val_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            best_checkpoint: None,
        }
    }

    /// Records one validated epoch; only a strict improvement replaces the
    /// checkpoint. Returns true once patience is exhausted.
    pub fn observe(&mut self, epoch: usize, metric: f64, net: &Network) -> bool {
        if metric > self.best_val_metric {
            self.best_val_metric = metric;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
            self.best_checkpoint = Some(net.clone());
        } else {
            self.epochs_since_best = epoch - self.best_epoch;
        }
        self.epochs_since_best >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_kappa: f64,
}

/// Predictions and κ of a network on one image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub kappa: f64,
}

impl Evaluation {
    pub fn agreement(&self) -> Result<Vec<f64>> {
        per_sample_agreement(&self.y_true, &self.y_pred)
    }
}

/// κ of `net` on `set` with the network's current statistics source.
pub fn evaluate(net: &Network, set: &ImageSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Input("evaluation on an empty split".into()));
    }
    let mut y_pred = Vec::with_capacity(set.len());
    for chunk in set.chunks(EVAL_CHUNK) {
        let (x, _) = chunk?;
        y_pred.extend(net.predict(&x)?);
    }
    let y_true: Vec<usize> = set.labels.iter().map(|&l| l as usize).collect();
    let kappa = kappa_from_labels(&y_true, &y_pred)?.kappa;
    Ok(Evaluation { y_true, y_pred, kappa })
}

/// Trains `net` in place and leaves it at the best-validation checkpoint.
///
/// Each epoch is one pass over a seeded shuffle of `train`; the loss is
/// cross-entropy plus the EWC penalty when `ewc` carries a positive weight.
/// Only the parameters of `config.regime` move and batch normalization
/// follows `config.bn_source`.
pub fn fit(
    net: &mut Network,
    train: &ImageSet,
    val: &ImageSet,
    config: &TrainConfig,
    ewc: Option<&EwcTerm>,
    phase: &str,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input(format!(
            "fit needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    net.set_bn_source(config.bn_source)?;
    let mask = trainable_parameters(config.regime);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, phase));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for idx in order.chunks(config.batch_size) {
            let (x, y) = train.batch(idx)?;
            let mut pass = net.forward(&x, true, &mask)?;
            let g = &mut pass.graph;
            let ce = g.softmax_cross_entropy(pass.logits, &y)?;
            let loss = match ewc {
                Some(term) if term.lambda > 0.0 => {
                    let pen = ewc_penalty(g, &pass.params, &term.anchor, &term.fisher, term.lambda)?;
                    total_loss(g, ce, pen)?
                }
                _ => ce,
            };
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::State(format!("loss became {value} in epoch {epoch}")));
            }
            loss_sum += value as f64 * idx.len() as f64;
            g.backward(loss)?;
            adam.step(net, &pass.grads(), &mask)?;
        }
        let validate = epoch % config.eval_every == 0 || epoch == config.max_epochs;
        let val_kappa = if validate { Some(evaluate(net, val)?.kappa) } else { None };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_kappa,
        });
        if let Some(k) = val_kappa {
            if stopper.observe(epoch, k, net) {
                break;
            }
        }
    }
    let best = stopper
        .best_checkpoint
        .take()
        .ok_or_else(|| Error::State("no validation epoch was run".into()))?;
    *net = best;
    Ok(FitOutcome {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_kappa: stopper.best_val_metric,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Construct {
    OOnly,
    OThenTNaive,
    JointOT,
}

impl fmt::Display for Construct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Construct::OOnly => "o-only",
            Construct::OThenTNaive => "o-then-t-naive",
            Construct::JointOT => "joint-ot",
        })
    }
}

impl std::str::FromStr for Construct {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o-only" => Ok(Construct::OOnly),
            "o-then-t-naive" => Ok(Construct::OThenTNaive),
            "joint-ot" => Ok(Construct::JointOT),
            _ => Err(Error::Input(format!(
                "unknown construct `{s}` (expected o-only, o-then-t-naive or joint-ot)"
            ))),
        }
    }
}

impl From<Construct> for String {
    fn from(c: Construct) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Construct {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// What produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunKind {
    Baseline { construct: Construct },
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPair {
    pub o: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub kind: RunKind,
    pub regime: Regime,
    pub bn_source: StatSource,
    pub lambda: f64,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Test κ of the returned model.
    pub test: KappaPair,
    /// Test κ of the starting model, for fine-tuning runs.
    pub pre: Option<KappaPair>,
    /// Paired test on O-test per-sample agreement, after vs before.
    pub wilcoxon_o: Option<WilcoxonResult>,
}

/// Everything a baseline run produces.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub report: RunReport,
    pub network: Network,
}

/// Test κ on both domains, with the network's current statistics source.
pub fn test_kappas(net: &Network, data: &DomainPair) -> Result<KappaPair> {
    Ok(KappaPair {
        o: evaluate(net, &data.o.image_set(Split::Test))?.kappa,
        t: evaluate(net, &data.t.image_set(Split::Test))?.kappa,
    })
}

/// Fresh network trained on O with batch statistics tracked in the O slot.
pub fn train_on_o(data: &DomainPair, config: &TrainConfig) -> Result<(Network, FitOutcome)> {
    let cfg = TrainConfig {
        regime: Regime::AllLayers,
        bn_source: StatSource::CurrentBatch(DomainTag::O),
        lambda: 0.0,
        ..*config
    };
    let mut net = Network::new(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init")));
    let fit_out = fit(
        &mut net,
        &data.o.image_set(Split::Train),
        &data.o.image_set(Split::Val),
        &cfg,
        None,
        "train-o",
    )?;
    Ok((net, fit_out))
}

pub fn run_baseline(construct: Construct, data: &DomainPair, config: &TrainConfig) -> Result<BaselineRun> {
    match construct {
        Construct::OOnly => {
            let (net, out) = train_on_o(data, config)?;
            let report = RunReport {
                kind: RunKind::Baseline { construct },
                regime: Regime::AllLayers,
                bn_source: StatSource::CurrentBatch(DomainTag::O),
                lambda: 0.0,
                seed: config.seed,
                epochs: out.epochs,
                best_epoch: out.best_epoch,
                test: test_kappas(&net, data)?,
                pre: None,
                wilcoxon_o: None,
            };
            Ok(BaselineRun { report, network: net })
        }
        Construct::OThenTNaive => {
            let (mut net, _) = train_on_o(data, config)?;
            let cfg = TrainConfig {
                regime: Regime::AllLayers,
                bn_source: StatSource::CurrentBatch(DomainTag::T),
                lambda: 0.0,
                ..*config
            };
            let report = finetune(&mut net, data, &cfg, None)?;
            Ok(BaselineRun { report, network: net })
        }
        Construct::JointOT => {
            // one model, one statistics slot shared by both domains
            let cfg = TrainConfig {
                regime: Regime::AllLayers,
                bn_source: StatSource::CurrentBatch(DomainTag::O),
                lambda: 0.0,
                ..*config
            };
            let mut net =
                Network::new(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init")));
            let train = data.o.image_set(Split::Train).concat(&data.t.image_set(Split::Train));
            let val = data.o.image_set(Split::Val).concat(&data.t.image_set(Split::Val));
            let out = fit(&mut net, &train, &val, &cfg, None, "train-joint")?;
            let report = RunReport {
                kind: RunKind::Baseline { construct },
                regime: Regime::AllLayers,
                bn_source: cfg.bn_source,
                lambda: 0.0,
                seed: config.seed,
                epochs: out.epochs,
                best_epoch: out.best_epoch,
                test: test_kappas(&net, data)?,
                pre: None,
                wilcoxon_o: None,
            };
            Ok(BaselineRun { report, network: net })
        }
    }
}

/// Anchor and Fisher for `net` as trained on O: Fisher is estimated on
/// O-train with the O running statistics.
pub fn prepare_ewc(net: &Network, data: &DomainPair, lambda: f64, fisher_samples: usize, seed: u64) -> Result<EwcTerm> {
    let mut frozen = net.clone();
    frozen.set_bn_source(StatSource::FrozenGlobal(DomainTag::O))?;
    let fisher = estimate_fisher(
        &frozen,
        &data.o.image_set(Split::Train),
        fisher_samples,
        derive_seed(seed, "fisher"),
    )?;
    Ok(EwcTerm {
        anchor: crate::ewc::AnchorSnapshot::of(net),
        fisher,
        lambda,
    })
}

/// Fine-tunes an O-trained network on T.
///
/// The starting model is scored on both test sets with its O statistics,
/// then trained on T-train (early stopping on T-val) and scored again under
/// `config.bn_source`, with step size `config.finetune_lr`. `ewc` is required whenever `config.lambda > 0`; its
/// weight is taken from the config.
pub fn finetune(
    net: &mut Network,
    data: &DomainPair,
    config: &TrainConfig,
    ewc: Option<&EwcTerm>,
) -> Result<RunReport> {
    config.validate()?;
    let term = match ewc {
        Some(t) if config.lambda > 0.0 => Some(EwcTerm {
            lambda: config.lambda,
            ..t.clone()
        }),
        None if config.lambda > 0.0 => {
            return Err(Error::State(format!(
                "lambda = {} needs an anchor snapshot and Fisher diagonal from O",
                config.lambda
            )))
        }
        _ => None,
    };

    net.set_bn_source(StatSource::CurrentBatch(DomainTag::O))?;
    let o_test = data.o.image_set(Split::Test);
    let pre_o = evaluate(net, &o_test)?;
    let pre = KappaPair {
        o: pre_o.kappa,
        t: evaluate(net, &data.t.image_set(Split::Test))?.kappa,
    };
    net.set_bn_source(config.bn_source)?;

    let fit_cfg = TrainConfig {
        lr: config.finetune_lr,
        ..*config
    };
    let out = fit(
        net,
        &data.t.image_set(Split::Train),
        &data.t.image_set(Split::Val),
        &fit_cfg,
        term.as_ref(),
        "finetune-t",
    )?;
    let post_o = evaluate(net, &o_test)?;
    let test = KappaPair {
        o: post_o.kappa,
        t: evaluate(net, &data.t.image_set(Split::Test))?.kappa,
    };
    let wilcoxon = wilcoxon_signed_rank(&post_o.agreement()?, &pre_o.agreement()?)?;
    Ok(RunReport {
        kind: RunKind::Finetune,
        regime: config.regime,
        bn_source: config.bn_source,
        lambda: config.lambda,
        seed: config.seed,
        epochs: out.epochs,
        best_epoch: out.best_epoch,
        test,
        pre: Some(pre),
        wilcoxon_o: Some(wilcoxon),
    })
}
