//! Losses, metrics, optimizers, the single and bi-level update steps, and
//! the pretrain → search → retrain phases.

mod metrics;
mod optim;
mod pipeline;

pub use metrics::{check_ordering, format_table, multi_task_loss, task_metrics, MetricsRecord, TaskMetrics};
pub use optim::{Adam, AdamConfig};
pub use pipeline::{
    build_retrain_model, build_search_model, run_pipeline, run_pretrain, run_retrain, run_search,
    pinned_architecture, PhaseReport, PipelineReport, Sink, Variant,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, make_windows, split, Normalizer, Splits, StDataset, Window};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model};
use crate::params::{ParamGrads, ParamId, Session};
use crate::rng::Rng;
use crate::search::TemperatureSchedule;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Search,
    Retrain,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Search => "search",
            Phase::Retrain => "retrain",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "search" => Ok(Phase::Search),
            "retrain" => Ok(Phase::Retrain),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

/// Settings for one phase. Fields left out of a config section take the
/// generic defaults below, not the phase-specific ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub clip_norm: f64,
    pub temperature: TemperatureSchedule,
    /// Stop after this many epochs without a better validation mean MAE.
    pub patience: Option<usize>,
    /// Cap on optimizer steps per epoch (after shuffling).
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            clip_norm: 5.0,
            temperature: TemperatureSchedule::default(),
            patience: None,
            max_batches_per_epoch: None,
        }
    }
}

impl PhaseConfig {
    pub fn pretrain_default() -> Self {
        PhaseConfig {
            epochs: 5,
            ..Default::default()
        }
    }

    pub fn search_default() -> Self {
        PhaseConfig {
            epochs: 30,
            ..Default::default()
        }
    }

    pub fn retrain_default() -> Self {
        PhaseConfig {
            epochs: 100,
            patience: Some(10),
            ..Default::default()
        }
    }

    pub fn validate(&self, phase: Phase) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{phase}.batch_size must be positive")));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("arch_lr", self.arch_lr),
            ("arch_weight_decay", self.arch_weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{phase}.{name} must be finite and non-negative"
                )));
            }
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::Config(format!("{phase}.max_batches_per_epoch must be positive")));
        }
        self.temperature.validate()
    }

    pub fn weight_optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..Default::default()
        }
    }

    pub fn arch_optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.arch_lr,
            weight_decay: self.arch_weight_decay,
            clip_norm: self.clip_norm,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub pretrain: PhaseConfig,
    pub search: PhaseConfig,
    pub retrain: PhaseConfig,
    /// Per-task loss weights; equal weights when absent.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            pretrain: PhaseConfig::pretrain_default(),
            search: PhaseConfig::search_default(),
            retrain: PhaseConfig::retrain_default(),
            loss_weights: None,
        }
    }
}

impl TrainingConfig {
    /// Short schedule sized for one CPU core: about a minute per run on the
    /// 20-node synthetic set at hidden width 16.
    pub fn desk() -> Self {
        TrainingConfig {
            pretrain: PhaseConfig {
                epochs: 1,
                max_batches_per_epoch: Some(10),
                ..Default::default()
            },
            search: PhaseConfig {
                epochs: 3,
                arch_lr: 3e-3,
                max_batches_per_epoch: Some(10),
                ..Default::default()
            },
            retrain: PhaseConfig {
                epochs: 12,
                lr: 5e-3,
                patience: Some(5),
                max_batches_per_epoch: Some(20),
                ..Default::default()
            },
            loss_weights: None,
        }
    }

    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        self.pretrain.validate(Phase::Pretrain)?;
        self.search.validate(Phase::Search)?;
        self.retrain.validate(Phase::Retrain)?;
        if let Some(w) = &self.loss_weights {
            if w.len() != n_tasks || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config(format!(
                    "loss_weights needs {n_tasks} finite non-negative entries"
                )));
            }
        }
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Search => &self.search,
            Phase::Retrain => &self.retrain,
        }
    }

    pub fn weights(&self, n_tasks: usize) -> Vec<f64> {
        self.loss_weights.clone().unwrap_or_else(|| vec![1.0; n_tasks])
    }
}

/// Raw and normalized series with their chronological window splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub raw: StDataset,
    pub normalized: StDataset,
    pub normalizer: Normalizer,
    pub splits: Splits,
}

impl PreparedData {
    pub fn new(raw: StDataset, history: usize, horizon: usize, ratios: [f64; 3]) -> Result<Self> {
        let windows = make_windows(&raw, history, horizon)?;
        let splits = split(&windows, ratios)?;
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(Error::Data(format!(
                "{} windows leave an empty train or validation split",
                windows.len()
            )));
        }
        let normalizer = Normalizer::fit(&raw, &splits.train)?;
        let normalized = normalizer.normalize(&raw);
        Ok(PreparedData {
            raw,
            normalized,
            normalizer,
            splits,
        })
    }

    pub fn windows(&self, split: &str) -> Result<&[Window]> {
        match split {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// A model-ready minibatch in normalized units.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Vec<Tensor>,
}

impl Batch {
    pub fn new(ds: &StDataset, windows: &[Window]) -> Self {
        let (x, targets) = make_batch(ds, windows);
        Batch { x, targets }
    }
}

/// Shuffled minibatches for one epoch.
pub fn epoch_batches(
    windows: &[Window],
    batch_size: usize,
    max_batches: Option<usize>,
    rng: &mut Rng,
) -> Vec<Vec<Window>> {
    let mut order = windows.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<Window>> = order.chunks(batch_size).map(<[Window]>::to_vec).collect();
    if let Some(cap) = max_batches {
        batches.truncate(cap);
    }
    batches
}

fn batch_loss(
    model: &Model,
    sess: &mut Session<'_>,
    batch: &Batch,
    mode: ForwardMode,
    weights: &[f64],
    rng: &mut Rng,
) -> Result<Var> {
    let x = sess.constant(batch.x.clone());
    let preds = model.forward(sess, x, mode, rng)?;
    let targets: Vec<Var> = batch.targets.iter().map(|t| sess.constant(t.clone())).collect();
    let loss = multi_task_loss(&mut sess.tape, &preds, &targets, weights)?;
    let value = sess.tape.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss became {value}")));
    }
    Ok(loss)
}

/// One optimizer step on the parameters owned by `opt`; everything else is
/// held constant. Returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    opt: &mut Adam,
    mode: ForwardMode,
    weights: &[f64],
    rng: &mut Rng,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, opt.ids(), mode, weights, rng)?;
    opt.step(&mut model.store, &grads);
    Ok(loss)
}

/// Loss and gradients w.r.t. `trainable` without touching the parameters.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    trainable: &[ParamId],
    mode: ForwardMode,
    weights: &[f64],
    rng: &mut Rng,
) -> Result<(f64, ParamGrads)> {
    let mut sess = Session::new(&model.store).train_only(trainable);
    let loss = batch_loss(model, &mut sess, batch, mode, weights, rng)?;
    let value = sess.tape.value(loss).item().expect("scalar loss");
    let grads = sess.backward(loss)?;
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub temperature: f64,
    /// Gumbel noise on the selectors; off means plain argmax.
    pub noise: bool,
}

#[derive(Clone, Debug)]
pub struct SearchStepReport {
    pub train_loss: f64,
    pub val_loss: f64,
    /// Gradient of the validation loss w.r.t. the architecture parameters
    /// at the updated weights.
    pub arch_grads: ParamGrads,
}

/// First-order bi-level step: weights move on the training batch, then the
/// architecture parameters move on the validation batch with the updated
/// weights held fixed.
#[allow(clippy::too_many_arguments)]
pub fn search_step(
    model: &mut Model,
    train_batch: &Batch,
    val_batch: &Batch,
    weight_opt: &mut Adam,
    arch_opt: &mut Adam,
    opts: SearchOptions,
    weights: &[f64],
    val_weights: &[f64],
    rng: &mut Rng,
) -> Result<SearchStepReport> {
    let mode = ForwardMode::Search {
        temperature: opts.temperature,
        noise: opts.noise,
    };
    let train_loss = train_step(model, train_batch, weight_opt, mode, weights, rng)?;
    let (val_loss, arch_grads) =
        loss_and_grads(model, val_batch, arch_opt.ids(), mode, val_weights, rng)?;
    arch_opt.step(&mut model.store, &arch_grads);
    Ok(SearchStepReport {
        train_loss,
        val_loss,
        arch_grads,
    })
}

/// Denormalized predictions over a window list, laid out per task as
/// index `window · N + node`.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub windows: Vec<Window>,
    pub n_nodes: usize,
    pub preds: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn metrics(&self, task_names: &[String]) -> Result<Vec<TaskMetrics>> {
        task_names
            .iter()
            .enumerate()
            .map(|(k, name)| task_metrics(name, &self.preds[k], &self.targets[k]))
            .collect()
    }
}

const EVAL_BATCH: usize = 128;

pub fn predict_windows(
    model: &Model,
    data: &PreparedData,
    windows: &[Window],
    mode: ForwardMode,
    rng: &mut Rng,
) -> Result<Predictions> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let k = data.raw.n_tasks();
    let n = data.raw.n_nodes();
    let mut preds = vec![Vec::with_capacity(windows.len() * n); k];
    let mut targets = vec![Vec::with_capacity(windows.len() * n); k];
    for chunk in windows.chunks(EVAL_BATCH) {
        let batch = Batch::new(&data.normalized, chunk);
        let out = model.predict(&batch.x, mode, rng)?;
        for task in 0..k {
            preds[task].extend(data.normalizer.denormalize(task, out[task].data()));
        }
        for w in chunk {
            for node in 0..n {
                for (task, t) in targets.iter_mut().enumerate() {
                    t.push(data.raw.value(w.target_time(), node, task));
                }
            }
        }
    }
    Ok(Predictions {
        windows: windows.to_vec(),
        n_nodes: n,
        preds,
        targets,
    })
}

pub fn evaluate(
    model: &Model,
    data: &PreparedData,
    windows: &[Window],
    mode: ForwardMode,
    rng: &mut Rng,
) -> Result<Vec<TaskMetrics>> {
    predict_windows(model, data, windows, mode, rng)?.metrics(data.raw.task_names())
}

/// Predicts every target as the last observed value of its input window.
pub fn copy_last_baseline(data: &PreparedData, windows: &[Window]) -> Result<Vec<TaskMetrics>> {
    let (n, k) = (data.raw.n_nodes(), data.raw.n_tasks());
    (0..k)
        .map(|task| {
            let mut p = Vec::with_capacity(windows.len() * n);
            let mut t = Vec::with_capacity(windows.len() * n);
            for w in windows {
                let last = w.start + w.history - 1;
                for node in 0..n {
                    p.push(data.raw.value(last, node, task));
                    t.push(data.raw.value(w.target_time(), node, task));
                }
            }
            task_metrics(&data.raw.task_names()[task], &p, &t)
        })
        .collect()
}
