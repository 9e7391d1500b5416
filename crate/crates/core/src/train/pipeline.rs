use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use super::{
    copy_last_baseline, epoch_batches, evaluate, search_step, train_step, Adam, Batch, MetricsRecord,
    Phase, PhaseConfig, PreparedData, SearchOptions, TaskMetrics, TrainingConfig,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{uniform_architecture, ForwardMode, Model, ModelConfig};
use crate::ops::{OperationKind, OperationRegistry};
use crate::params::{ParamGroup, ParamId};
use crate::rng::{self, Rng};
use crate::search::ArchitectureSpec;

/// Receives every metrics record as soon as it is produced.
pub type Sink<'a> = dyn FnMut(&MetricsRecord) -> Result<()> + 'a;

#[derive(Clone, Debug)]
pub struct PhaseReport {
    pub phase: Phase,
    pub history: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub architecture: Option<ArchitectureSpec>,
}

/// Search-width model with all candidates, initialized from the root seed.
pub fn build_search_model(config: &ModelConfig, graph: Arc<Graph>, seed: u64) -> Result<Model> {
    let mut rng = rng::stream(seed, rng::PARAM_INIT);
    Model::searchable(
        config,
        config.search_hidden_dim(),
        graph,
        &OperationRegistry::standard(),
        &mut rng,
    )
}

/// Full-width fixed model; operation weights start fresh.
pub fn build_retrain_model(
    spec: &ArchitectureSpec,
    config: &ModelConfig,
    graph: Arc<Graph>,
    seed: u64,
) -> Result<Model> {
    let mut rng = rng::stream(seed, &format!("{}.retrain", rng::PARAM_INIT));
    Model::from_architecture(spec, config, graph, &mut rng)
}

fn phase_stream(seed: u64, base: &str, phase: Phase) -> Rng {
    rng::stream(seed, &format!("{base}.{phase}"))
}

fn train_mode(model: &Model, temperature: f64) -> ForwardMode {
    if model.is_searchable() {
        ForwardMode::Search {
            temperature,
            noise: true,
        }
    } else {
        ForwardMode::Fixed
    }
}

struct Tracker<'s, 'a> {
    phase: Phase,
    start: Instant,
    history: Vec<MetricsRecord>,
    best_epoch: usize,
    best_val_mae: f64,
    sink: &'s mut Sink<'a>,
}

impl<'s, 'a> Tracker<'s, 'a> {
    fn new(phase: Phase, sink: &'s mut Sink<'a>) -> Self {
        Tracker {
            phase,
            start: Instant::now(),
            history: Vec::new(),
            best_epoch: 0,
            best_val_mae: f64::INFINITY,
            sink,
        }
    }

    /// Logs validation metrics for `epoch`; true when they improve on the best so far.
    fn log(
        &mut self,
        model: &Model,
        data: &PreparedData,
        epoch: usize,
        train_loss: f64,
        temperature: Option<f64>,
        rng: &mut Rng,
    ) -> Result<bool> {
        let tasks = evaluate(model, data, &data.splits.val, model.eval_mode(), rng)?;
        let mut rec = MetricsRecord::new(self.phase.name(), epoch, "val", tasks);
        rec.train_loss = Some(train_loss);
        rec.temperature = temperature;
        rec.fusion = Some(model.fusion_weights());
        rec.wall_time_s = self.start.elapsed().as_secs_f64();
        (self.sink)(&rec)?;
        let improved = rec.mean_mae < self.best_val_mae;
        if improved {
            self.best_val_mae = rec.mean_mae;
            self.best_epoch = epoch;
        }
        self.history.push(rec);
        Ok(improved)
    }

    fn finish(self, architecture: Option<ArchitectureSpec>) -> PhaseReport {
        PhaseReport {
            phase: self.phase,
            history: self.history,
            best_epoch: self.best_epoch,
            best_val_mae: self.best_val_mae,
            architecture,
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Weights only; selectors and fusion stay at their initial values while
/// operations are sampled with Gumbel noise.
pub fn run_pretrain(
    model: &mut Model,
    data: &PreparedData,
    cfg: &PhaseConfig,
    weights: &[f64],
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<PhaseReport> {
    let mut shuffle = phase_stream(seed, rng::DATA_SHUFFLE, Phase::Pretrain);
    let mut gumbel = phase_stream(seed, rng::GUMBEL, Phase::Pretrain);
    let ids = model.store.ids_in(ParamGroup::Weight);
    let mut opt = Adam::new(ids, &model.store, cfg.weight_optimizer());
    let temperature = cfg.temperature.at(0, cfg.epochs);
    let mode = train_mode(model, temperature);
    let mut tracker = Tracker::new(Phase::Pretrain, sink);
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for windows in epoch_batches(&data.splits.train, cfg.batch_size, cfg.max_batches_per_epoch, &mut shuffle) {
            let batch = Batch::new(&data.normalized, &windows);
            losses.push(train_step(model, &batch, &mut opt, mode, weights, &mut gumbel)?);
        }
        tracker.log(model, data, epoch, mean(&losses), None, &mut gumbel)?;
    }
    Ok(tracker.finish(None))
}

/// Alternates bi-level steps with an annealed temperature and derives the
/// architecture at the end.
pub fn run_search(
    model: &mut Model,
    data: &PreparedData,
    cfg: &PhaseConfig,
    weights: &[f64],
    freeze_fusion: bool,
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<PhaseReport> {
    if !model.is_searchable() {
        return Err(Error::Architecture(
            "search needs a model with candidate operations".into(),
        ));
    }
    let mut shuffle = phase_stream(seed, rng::DATA_SHUFFLE, Phase::Search);
    let mut gumbel = phase_stream(seed, rng::GUMBEL, Phase::Search);
    let mut weight_opt = Adam::new(
        model.store.ids_in(ParamGroup::Weight),
        &model.store,
        cfg.weight_optimizer(),
    );
    let mut arch_ids = model.selector_params();
    if !freeze_fusion {
        arch_ids.extend(model.fusion_params());
    }
    let mut arch_opt = Adam::new(arch_ids, &model.store, cfg.arch_optimizer());
    let mut tracker = Tracker::new(Phase::Search, sink);
    for epoch in 0..cfg.epochs {
        let temperature = cfg.temperature.at(epoch, cfg.epochs);
        let opts = SearchOptions {
            temperature,
            noise: true,
        };
        let train = epoch_batches(&data.splits.train, cfg.batch_size, cfg.max_batches_per_epoch, &mut shuffle);
        let val = epoch_batches(&data.splits.val, cfg.batch_size, None, &mut shuffle);
        let mut losses = Vec::new();
        for (i, windows) in train.iter().enumerate() {
            let train_batch = Batch::new(&data.normalized, windows);
            let val_batch = Batch::new(&data.normalized, &val[i % val.len()]);
            let report = search_step(
                model,
                &train_batch,
                &val_batch,
                &mut weight_opt,
                &mut arch_opt,
                opts,
                weights,
                weights,
                &mut gumbel,
            )?;
            losses.push(report.train_loss);
        }
        tracker.log(model, data, epoch, mean(&losses), Some(temperature), &mut gumbel)?;
    }
    let spec = model.derive_architecture();
    Ok(tracker.finish(Some(spec)))
}

/// Trains a fixed model with early stopping on validation mean MAE and
/// leaves it at its best epoch.
pub fn run_retrain(
    model: &mut Model,
    data: &PreparedData,
    cfg: &PhaseConfig,
    weights: &[f64],
    freeze_fusion: bool,
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<PhaseReport> {
    let mut shuffle = phase_stream(seed, rng::DATA_SHUFFLE, Phase::Retrain);
    let mut gumbel = phase_stream(seed, rng::GUMBEL, Phase::Retrain);
    let mut ids: Vec<ParamId> = model.store.ids_in(ParamGroup::Weight);
    if !freeze_fusion {
        ids.extend(model.fusion_params());
    }
    let mut opt = Adam::new(ids, &model.store, cfg.weight_optimizer());
    let mode = train_mode(model, cfg.temperature.at(0, cfg.epochs));
    let mut tracker = Tracker::new(Phase::Retrain, sink);
    let mut best = model.store.clone();
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        for windows in epoch_batches(&data.splits.train, cfg.batch_size, cfg.max_batches_per_epoch, &mut shuffle) {
            let batch = Batch::new(&data.normalized, &windows);
            losses.push(train_step(model, &batch, &mut opt, mode, weights, &mut gumbel)?);
        }
        if tracker.log(model, data, epoch, mean(&losses), None, &mut gumbel)? {
            best = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    model.store = best;
    let spec = model.derive_architecture();
    Ok(tracker.finish(Some(spec)))
}

/// Full method or one of its ablations.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    Full,
    /// No operation search: operations come from the given spec, or GCN in
    /// every layer but the last and RNN on top.
    NoAlpha(Option<ArchitectureSpec>),
    /// Fusion weights stay uniform throughout.
    NoBeta,
    /// Layers without shared modules.
    NoShared,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAlpha(_) => "no_alpha",
            Variant::NoBeta => "no_beta",
            Variant::NoShared => "no_shared",
        }
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if *self == Variant::NoShared {
            cfg.shared_modules = 0;
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_alpha" => Ok(Variant::NoAlpha(None)),
            "no_beta" => Ok(Variant::NoBeta),
            "no_shared" => Ok(Variant::NoShared),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected no_alpha, no_beta or no_shared)"
            ))),
        }
    }
}

pub fn pinned_architecture(config: &ModelConfig) -> Result<ArchitectureSpec> {
    let mut ops = vec![OperationKind::Gcn; config.n_layers];
    if let Some(top) = ops.last_mut() {
        *top = OperationKind::Rnn;
    }
    uniform_architecture(config, &ops)
}

pub struct PipelineReport {
    pub variant: Variant,
    pub architecture: ArchitectureSpec,
    pub model: Model,
    pub phases: Vec<PhaseReport>,
    pub test: Vec<TaskMetrics>,
    pub baseline: Vec<TaskMetrics>,
}

impl PipelineReport {
    pub fn mean_test_mae(&self) -> f64 {
        mean(&self.test.iter().map(|t| t.mae).collect::<Vec<_>>())
    }
}

/// Pretrain → search → retrain (or the ablated equivalent), then test metrics.
pub fn run_pipeline(
    data: &PreparedData,
    model_config: &ModelConfig,
    training: &TrainingConfig,
    seed: u64,
    variant: Variant,
    sink: &mut Sink<'_>,
) -> Result<PipelineReport> {
    let config = variant.model_config(model_config);
    config.validate()?;
    training.validate(config.n_tasks)?;
    let weights = training.weights(config.n_tasks);
    let graph = data.normalized.graph().clone();
    let freeze_fusion = variant == Variant::NoBeta;
    let mut phases = Vec::new();

    let spec = match &variant {
        Variant::NoAlpha(spec) => match spec {
            Some(s) => s.clone(),
            None => pinned_architecture(&config)?,
        },
        _ => {
            let mut model = build_search_model(&config, graph.clone(), seed)?;
            phases.push(run_pretrain(&mut model, data, &training.pretrain, &weights, seed, sink)?);
            let report = run_search(&mut model, data, &training.search, &weights, freeze_fusion, seed, sink)?;
            let spec = report.architecture.clone().expect("search derives an architecture");
            phases.push(report);
            spec
        }
    };

    let mut model = build_retrain_model(&spec, &config, graph, seed)?;
    phases.push(run_retrain(&mut model, data, &training.retrain, &weights, freeze_fusion, seed, sink)?);
    let mut eval_rng = rng::stream(seed, rng::GUMBEL);
    let test = evaluate(&model, data, &data.splits.test, ForwardMode::Fixed, &mut eval_rng)?;
    let baseline = copy_last_baseline(data, &data.splits.test)?;
    Ok(PipelineReport {
        variant,
        architecture: spec,
        model,
        phases,
        test,
        baseline,
    })
}
