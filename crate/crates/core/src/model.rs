//! End-to-end network: shared bottom → hidden layers of task-specific and
//! shared modules → one tower per task.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::{apply, BuildContext, OpSettings, OperationKind, OperationRegistry, StOperation};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::search::{
    argmax, fuse, gumbel_softmax_var, hard_select, round_sig9, sample_gumbel,
    straight_through_mix, task_key, ArchitectureSpec, LayerSpec, ModuleRole, ModuleSpec,
    ARCHITECTURE_VERSION,
};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_tasks: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub specific_per_task: usize,
    pub shared_modules: usize,
    pub history: usize,
    pub horizon: usize,
    pub search_dim_divisor: usize,
    /// Width of an optional hidden rectifier layer in each tower; 0 keeps
    /// the tower a single affine map.
    pub tower_hidden: usize,
    pub ops: OpSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_tasks: 2,
            n_layers: 3,
            hidden_dim: 32,
            specific_per_task: 1,
            shared_modules: 1,
            history: 12,
            horizon: 1,
            search_dim_divisor: 4,
            tower_hidden: 0,
            ops: OpSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_tasks", self.n_tasks),
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("specific_per_task", self.specific_per_task),
            ("history", self.history),
            ("horizon", self.horizon),
            ("search_dim_divisor", self.search_dim_divisor),
            ("ops.cnn_kernel", self.ops.cnn_kernel),
            ("ops.cnn_dilation", self.ops.cnn_dilation),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Hidden width used while pretraining and searching.
    pub fn search_hidden_dim(&self) -> usize {
        self.hidden_dim.div_ceil(self.search_dim_divisor).max(4)
    }

    /// Number of module outputs fused into each task stream.
    pub fn fan_in(&self) -> usize {
        self.specific_per_task + self.shared_modules
    }
}

/// How modules pick their operation during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    /// Hard Gumbel-max selection with a relaxed backward. With `noise` off
    /// the choice is the plain argmax of the logits.
    Search { temperature: f64, noise: bool },
    /// Each module runs its single operation.
    Fixed,
}

pub enum ModuleOps {
    Searchable {
        candidates: Vec<Box<dyn StOperation>>,
        logits: ParamId,
    },
    Fixed(Box<dyn StOperation>),
}

pub struct Module {
    pub role: ModuleRole,
    pub ops: ModuleOps,
}

impl Module {
    pub fn params(&self) -> Vec<ParamId> {
        match &self.ops {
            ModuleOps::Searchable { candidates, logits } => candidates
                .iter()
                .flat_map(|c| c.params())
                .chain([*logits])
                .collect(),
            ModuleOps::Fixed(op) => op.params(),
        }
    }

    pub fn weight_params(&self) -> Vec<ParamId> {
        match &self.ops {
            ModuleOps::Searchable { candidates, .. } => {
                candidates.iter().flat_map(|c| c.params()).collect()
            }
            ModuleOps::Fixed(op) => op.params(),
        }
    }
}

/// Selection made for one module in one forward pass.
#[derive(Clone, Debug)]
struct Choice {
    probs: Option<Var>,
    onehot: Vec<f64>,
    index: usize,
}

pub struct HiddenLayer {
    /// Task modules first (grouped by task, in task order), then shared.
    pub modules: Vec<Module>,
    /// Fusion logits β per task, over [task modules…, shared modules…].
    pub fusion: Vec<ParamId>,
}

impl HiddenLayer {
    fn feeding(&self, task: usize) -> Vec<usize> {
        let own = self
            .modules
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == ModuleRole::Task(task))
            .map(|(i, _)| i);
        let shared = self
            .modules
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == ModuleRole::Shared)
            .map(|(i, _)| i);
        own.chain(shared).collect()
    }

    pub fn shared_modules(&self) -> impl Iterator<Item = &Module> {
        self.modules.iter().filter(|m| m.role == ModuleRole::Shared)
    }

    pub fn task_modules(&self, task: usize) -> impl Iterator<Item = &Module> {
        self.modules
            .iter()
            .filter(move |m| m.role == ModuleRole::Task(task))
    }
}

pub struct SharedBottom {
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct TowerHead {
    pub hidden: Option<(ParamId, ParamId)>,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct Model {
    config: ModelConfig,
    hidden_dim: usize,
    graph: Arc<Graph>,
    pub store: ParamStore,
    pub bottom: SharedBottom,
    pub layers: Vec<HiddenLayer>,
    pub towers: Vec<TowerHead>,
}

fn init_weight(store: &mut ParamStore, rng: &mut Rng, name: String, shape: &[usize]) -> ParamId {
    use rand::Rng as _;
    let fan_in = shape[0];
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    store.add(
        name,
        ParamGroup::Weight,
        Tensor::new(shape.to_vec(), data).expect("shape matches"),
    )
}

/// Module layout with either all five candidates or one fixed operation.
enum Blueprint<'a> {
    Search,
    Fixed(&'a ArchitectureSpec),
}

impl Model {
    /// Search-mode model: every module holds all registered candidates and
    /// uniform selector logits; fusion logits start uniform.
    pub fn searchable(
        config: &ModelConfig,
        hidden_dim: usize,
        graph: Arc<Graph>,
        registry: &OperationRegistry,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(config, hidden_dim, graph, registry, Blueprint::Search, rng)
    }

    /// Fixed model with the operations and fusion weights of `spec`, at the
    /// configured full hidden width. Operation weights are freshly initialized.
    pub fn from_architecture(
        spec: &ArchitectureSpec,
        config: &ModelConfig,
        graph: Arc<Graph>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::from_architecture_with_dim(spec, config, config.hidden_dim, graph, rng)
    }

    pub fn from_architecture_with_dim(
        spec: &ArchitectureSpec,
        config: &ModelConfig,
        hidden_dim: usize,
        graph: Arc<Graph>,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.n_layers != config.n_layers || spec.n_tasks != config.n_tasks {
            return Err(Error::Architecture(format!(
                "architecture has {} layers / {} tasks but the model config has {} / {}",
                spec.n_layers, spec.n_tasks, config.n_layers, config.n_tasks
            )));
        }
        for l in 0..spec.n_layers {
            let shared = spec.ops_for(l, ModuleRole::Shared).len();
            if shared != config.shared_modules {
                return Err(Error::Architecture(format!(
                    "layer {l} has {shared} shared modules, config expects {}",
                    config.shared_modules
                )));
            }
            for t in 0..spec.n_tasks {
                let own = spec.ops_for(l, ModuleRole::Task(t)).len();
                if own != config.specific_per_task {
                    return Err(Error::Architecture(format!(
                        "layer {l} task:{t} has {own} modules, config expects {}",
                        config.specific_per_task
                    )));
                }
            }
        }
        let registry = OperationRegistry::standard();
        Self::build(config, hidden_dim, graph, &registry, Blueprint::Fixed(spec), rng)
    }

    fn build(
        config: &ModelConfig,
        hidden_dim: usize,
        graph: Arc<Graph>,
        registry: &OperationRegistry,
        blueprint: Blueprint<'_>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = hidden_dim;
        let k = config.n_tasks;
        let mut store = ParamStore::new();

        let bottom = SharedBottom {
            weight: init_weight(&mut store, rng, "bottom.weight".into(), &[k, d]),
            bias: store.add("bottom.bias", ParamGroup::Weight, Tensor::zeros(&[d])),
        };

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut roles: Vec<(ModuleRole, String)> = Vec::new();
            for t in 0..k {
                for j in 0..config.specific_per_task {
                    roles.push((ModuleRole::Task(t), format!("layer{l}.task{t}.m{j}")));
                }
            }
            for j in 0..config.shared_modules {
                roles.push((ModuleRole::Shared, format!("layer{l}.shared{j}")));
            }

            let mut modules = Vec::with_capacity(roles.len());
            for (role, name) in roles {
                let ops = match &blueprint {
                    Blueprint::Search => {
                        let mut candidates = Vec::with_capacity(OperationKind::COUNT);
                        for kind in OperationKind::ALL {
                            let prefix = format!("{name}.{kind}");
                            let ctx = BuildContext {
                                hidden_dim: d,
                                graph: Some(&graph),
                                settings: &config.ops,
                                prefix: &prefix,
                            };
                            candidates.push(registry.build(kind, &ctx, &mut store, rng)?);
                        }
                        let logits = store.add(
                            format!("{name}.logits"),
                            ParamGroup::Architecture,
                            Tensor::zeros(&[OperationKind::COUNT]),
                        );
                        ModuleOps::Searchable { candidates, logits }
                    }
                    Blueprint::Fixed(spec) => {
                        let position = modules
                            .iter()
                            .filter(|m: &&Module| m.role == role)
                            .count();
                        let kind = spec.ops_for(l, role)[position];
                        let prefix = format!("{name}.{kind}");
                        let ctx = BuildContext {
                            hidden_dim: d,
                            graph: Some(&graph),
                            settings: &config.ops,
                            prefix: &prefix,
                        };
                        ModuleOps::Fixed(registry.build(kind, &ctx, &mut store, rng)?)
                    }
                };
                modules.push(Module { role, ops });
            }

            let mut fusion = Vec::with_capacity(k);
            for t in 0..k {
                let init = match &blueprint {
                    Blueprint::Search => Tensor::zeros(&[config.fan_in()]),
                    Blueprint::Fixed(spec) => {
                        let w = &spec.layers[l].fusion[&task_key(t)];
                        Tensor::from_vec(w.iter().map(|v| v.max(1e-12).ln()).collect())
                    }
                };
                fusion.push(store.add(
                    format!("layer{l}.fusion.task{t}"),
                    ParamGroup::Architecture,
                    init,
                ));
            }
            layers.push(HiddenLayer { modules, fusion });
        }

        let flat = config.history * d;
        let mut towers = Vec::with_capacity(k);
        for t in 0..k {
            let (hidden, in_dim) = if config.tower_hidden > 0 {
                let h = config.tower_hidden;
                let w = init_weight(&mut store, rng, format!("tower{t}.hidden.weight"), &[flat, h]);
                let b = store.add(format!("tower{t}.hidden.bias"), ParamGroup::Weight, Tensor::zeros(&[h]));
                (Some((w, b)), h)
            } else {
                (None, flat)
            };
            towers.push(TowerHead {
                hidden,
                weight: init_weight(&mut store, rng, format!("tower{t}.weight"), &[in_dim, 1]),
                bias: store.add(format!("tower{t}.bias"), ParamGroup::Weight, Tensor::zeros(&[1])),
            });
        }

        Ok(Model {
            config: config.clone(),
            hidden_dim: d,
            graph,
            store,
            bottom,
            layers,
            towers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn is_searchable(&self) -> bool {
        self.layers.iter().any(|l| {
            l.modules
                .iter()
                .any(|m| matches!(m.ops, ModuleOps::Searchable { .. }))
        })
    }

    /// Selector logits of every searchable module.
    pub fn selector_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| &l.modules)
            .filter_map(|m| match m.ops {
                ModuleOps::Searchable { logits, .. } => Some(logits),
                ModuleOps::Fixed(_) => None,
            })
            .collect()
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.fusion.iter().copied()).collect()
    }

    /// Parameters of the shared modules (all layers).
    pub fn shared_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.shared_modules().flat_map(|m| m.weight_params()))
            .collect()
    }

    /// Weights of the task-specific modules and tower of `task`.
    pub fn task_params(&self, task: usize) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| l.task_modules(task).flat_map(|m| m.weight_params()))
            .collect();
        let tower = &self.towers[task];
        if let Some((w, b)) = tower.hidden {
            ids.extend([w, b]);
        }
        ids.extend([tower.weight, tower.bias]);
        ids
    }

    /// softmax(β) for every (layer, task), layer-major.
    pub fn fusion_weights(&self) -> Vec<Vec<f64>> {
        self.fusion_params()
            .into_iter()
            .map(|id| softmax_rounded(self.store.get(id).data()))
            .collect()
    }

    pub fn shared_bottom_forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = sess.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.config.n_tasks {
            return Err(Error::ShapeMismatch {
                primitive: "shared_bottom",
                lhs: shape,
                rhs: vec![self.config.n_tasks],
            });
        }
        let w = sess.param(self.bottom.weight);
        let b = sess.param(self.bottom.bias);
        let pre = sess.tape.matmul(x, w)?;
        let pre = sess.tape.add(pre, b)?;
        sess.tape.relu(pre)
    }

    fn choose(
        &self,
        sess: &mut Session<'_>,
        module: &Module,
        mode: ForwardMode,
        rng: &mut Rng,
    ) -> Result<Option<Choice>> {
        let ModuleOps::Searchable { logits, .. } = &module.ops else {
            return Ok(None);
        };
        let ForwardMode::Search { temperature, noise } = mode else {
            return Err(Error::Config(
                "a searchable model needs a search forward mode".into(),
            ));
        };
        let gumbel = if noise {
            sample_gumbel(OperationKind::COUNT, rng)
        } else {
            vec![0.0; OperationKind::COUNT]
        };
        let theta = sess.param(*logits);
        let (onehot, index) = hard_select(sess.tape.value(theta).data(), &gumbel);
        // Without a gradient path to θ the relaxation is never needed.
        let probs = if sess.tape.requires_grad(theta) {
            Some(gumbel_softmax_var(&mut sess.tape, theta, &gumbel, temperature)?)
        } else {
            None
        };
        Ok(Some(Choice {
            probs,
            onehot,
            index,
        }))
    }

    fn module_forward(
        &self,
        sess: &mut Session<'_>,
        module: &Module,
        choice: Option<&Choice>,
        z: Var,
    ) -> Result<Var> {
        match (&module.ops, choice) {
            (ModuleOps::Fixed(op), _) => apply(op.as_ref(), sess, z),
            (ModuleOps::Searchable { candidates, .. }, Some(choice)) => match choice.probs {
                Some(p) => {
                    let outs = candidates
                        .iter()
                        .map(|c| apply(c.as_ref(), sess, z))
                        .collect::<Result<Vec<_>>>()?;
                    straight_through_mix(&mut sess.tape, p, &choice.onehot, &outs)
                }
                None => apply(candidates[choice.index].as_ref(), sess, z),
            },
            (ModuleOps::Searchable { .. }, None) => {
                Err(Error::Config("searchable module without a selection".into()))
            }
        }
    }

    pub fn hidden_layer_forward(
        &self,
        sess: &mut Session<'_>,
        layer: &HiddenLayer,
        streams: &[Var],
        mode: ForwardMode,
        rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        if streams.len() != self.config.n_tasks {
            return Err(Error::Config(format!(
                "hidden layer expects {} task streams, got {}",
                self.config.n_tasks,
                streams.len()
            )));
        }
        let choices = layer
            .modules
            .iter()
            .map(|m| self.choose(sess, m, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        // A shared module fed the same stream twice (the first layer, where
        // every task starts from the bottom output) is evaluated once.
        let mut memo: HashMap<(usize, Var), Var> = HashMap::new();
        let mut out = Vec::with_capacity(streams.len());
        for (task, &stream) in streams.iter().enumerate() {
            let mut outputs = Vec::new();
            for idx in layer.feeding(task) {
                let y = match memo.get(&(idx, stream)) {
                    Some(&y) => y,
                    None => {
                        let y = self.module_forward(
                            sess,
                            &layer.modules[idx],
                            choices[idx].as_ref(),
                            stream,
                        )?;
                        memo.insert((idx, stream), y);
                        y
                    }
                };
                outputs.push(y);
            }
            let beta = sess.param(layer.fusion[task]);
            out.push(fuse(&mut sess.tape, beta, &outputs)?);
        }
        Ok(out)
    }

    pub fn tower_forward(&self, sess: &mut Session<'_>, task: usize, z: Var) -> Result<Var> {
        let head = &self.towers[task];
        let shape = sess.tape.shape(z).to_vec();
        let (b, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
        let per_node = sess.tape.permute(z, &[0, 2, 1, 3])?;
        let mut h = sess.tape.reshape(per_node, &[b, n, t * d])?;
        if let Some((hw, hb)) = head.hidden {
            let hw = sess.param(hw);
            let hb = sess.param(hb);
            let pre = sess.tape.matmul(h, hw)?;
            let pre = sess.tape.add(pre, hb)?;
            h = sess.tape.relu(pre)?;
        }
        let w = sess.param(head.weight);
        let bias = sess.param(head.bias);
        let y = sess.tape.matmul(h, w)?;
        let y = sess.tape.add(y, bias)?;
        sess.tape.reshape(y, &[b, n])
    }

    /// Per-task predictions shaped (B, N) for an input block (B, T, N, K).
    pub fn forward(
        &self,
        sess: &mut Session<'_>,
        x: Var,
        mode: ForwardMode,
        rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        let shape = sess.tape.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != self.config.history
            || shape[2] != self.graph.n_nodes()
        {
            return Err(Error::ShapeMismatch {
                primitive: "model",
                lhs: shape,
                rhs: vec![self.config.history, self.graph.n_nodes(), self.config.n_tasks],
            });
        }
        let z0 = self.shared_bottom_forward(sess, x)?;
        let mut streams = vec![z0; self.config.n_tasks];
        for layer in &self.layers {
            streams = self.hidden_layer_forward(sess, layer, &streams, mode, rng)?;
        }
        streams
            .iter()
            .enumerate()
            .map(|(task, &z)| self.tower_forward(sess, task, z))
            .collect()
    }

    /// Evaluation-time mode for this model.
    pub fn eval_mode(&self) -> ForwardMode {
        if self.is_searchable() {
            ForwardMode::Search {
                temperature: 1.0,
                noise: false,
            }
        } else {
            ForwardMode::Fixed
        }
    }

    /// Forward without gradients; returns per-task predictions.
    pub fn predict(&self, x: &Tensor, mode: ForwardMode, rng: &mut Rng) -> Result<Vec<Tensor>> {
        let mut sess = Session::new(&self.store)
            .freeze_group(ParamGroup::Weight)
            .freeze_group(ParamGroup::Architecture);
        let xv = sess.constant(x.clone());
        let preds = self.forward(&mut sess, xv, mode, rng)?;
        Ok(preds.iter().map(|&p| sess.tape.value(p).clone()).collect())
    }

    /// Argmax operation per module (lowest index on ties) and softmax(β)
    /// per task, rounded to the serialized precision.
    pub fn derive_architecture(&self) -> ArchitectureSpec {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let modules = layer
                    .modules
                    .iter()
                    .map(|m| ModuleSpec {
                        role: m.role,
                        op: match &m.ops {
                            ModuleOps::Searchable { logits, .. } => {
                                OperationKind::from_index(argmax(self.store.get(*logits).data()))
                                    .expect("five logits")
                            }
                            ModuleOps::Fixed(op) => op.kind(),
                        },
                    })
                    .collect();
                let fusion = layer
                    .fusion
                    .iter()
                    .enumerate()
                    .map(|(t, &id)| (task_key(t), softmax_rounded(self.store.get(id).data())))
                    .collect();
                LayerSpec { fusion, modules }
            })
            .collect();
        ArchitectureSpec {
            hidden_dim: self.config.hidden_dim,
            layers,
            n_layers: self.config.n_layers,
            n_tasks: self.config.n_tasks,
            version: ARCHITECTURE_VERSION,
        }
    }
}

fn softmax_rounded(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| round_sig9(v / s)).collect()
}

/// An architecture with the same operation list (bottom to top) in every
/// module of each layer and uniform fusion. Used to pin operations by hand.
pub fn uniform_architecture(config: &ModelConfig, ops_per_layer: &[OperationKind]) -> Result<ArchitectureSpec> {
    if ops_per_layer.len() != config.n_layers {
        return Err(Error::Config(format!(
            "{} operations given for {} layers",
            ops_per_layer.len(),
            config.n_layers
        )));
    }
    let fan_in = config.fan_in();
    let layers = ops_per_layer
        .iter()
        .map(|&op| {
            let mut modules = Vec::new();
            for t in 0..config.n_tasks {
                for _ in 0..config.specific_per_task {
                    modules.push(ModuleSpec {
                        op,
                        role: ModuleRole::Task(t),
                    });
                }
            }
            for _ in 0..config.shared_modules {
                modules.push(ModuleSpec {
                    op,
                    role: ModuleRole::Shared,
                });
            }
            let fusion = (0..config.n_tasks)
                .map(|t| (task_key(t), vec![round_sig9(1.0 / fan_in as f64); fan_in]))
                .collect();
            LayerSpec { fusion, modules }
        })
        .collect();
    let spec = ArchitectureSpec {
        hidden_dim: config.hidden_dim,
        layers,
        n_layers: config.n_layers,
        n_tasks: config.n_tasks,
        version: ARCHITECTURE_VERSION,
    };
    spec.validate()?;
    Ok(spec)
}
