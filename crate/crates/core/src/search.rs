//! Operation selection and module fusion.
//!
//! Selector logits θ stand in for log α. The forward pass uses the hard
//! Gumbel-max choice; gradients reach θ through the Gumbel-softmax
//! relaxation (straight-through). Fusion logits β weight the modules
//! feeding each task stream.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ops::OperationKind;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// g = −log(−log ε).
pub fn gumbel_from_uniform(eps: f64) -> f64 {
    -(-eps.ln()).ln()
}

/// `count` i.i.d. standard Gumbel draws; ε is kept strictly inside (0, 1).
pub fn sample_gumbel(count: usize, rng: &mut Rng) -> Vec<f64> {
    (0..count)
        .map(|_| loop {
            let eps: f64 = rng.random();
            if eps > 0.0 {
                break gumbel_from_uniform(eps);
            }
        })
        .collect()
}

/// Selector logits plus temperature for one module.
#[derive(Clone, Debug, PartialEq)]
pub struct OpSelector {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl OpSelector {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(OpSelector {
            logits,
            temperature,
        })
    }

    pub fn uniform(temperature: f64) -> Result<Self> {
        Self::new(vec![0.0; OperationKind::COUNT], temperature)
    }

    pub fn probabilities(&self, gumbel: &[f64]) -> Result<Vec<f64>> {
        gumbel_softmax(&self.logits, gumbel, self.temperature)
    }

    pub fn hard_select(&self, gumbel: &[f64]) -> (Vec<f64>, usize) {
        hard_select(&self.logits, gumbel)
    }
}

/// Relaxed selection on a tape: softmax((θ + g)/τ), differentiable in θ.
pub fn gumbel_softmax_var(tape: &mut Tape, logits: Var, gumbel: &[f64], tau: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if tape.shape(logits) != [gumbel.len()] {
        return Err(Error::ShapeMismatch {
            primitive: "gumbel_softmax",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![gumbel.len()],
        });
    }
    let g = tape.constant(Tensor::from_vec(gumbel.to_vec()));
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    tape.softmax(scaled, 0)
}

pub fn gumbel_softmax(logits: &[f64], gumbel: &[f64], tau: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(logits.to_vec()));
    let p = gumbel_softmax_var(&mut tape, l, gumbel, tau)?;
    Ok(tape.value(p).data().to_vec())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-max: one-hot of argmax(θ + g) and its index.
pub fn hard_select(logits: &[f64], gumbel: &[f64]) -> (Vec<f64>, usize) {
    let perturbed: Vec<f64> = logits.iter().zip(gumbel).map(|(l, g)| l + g).collect();
    let index = argmax(&perturbed);
    let mut onehot = vec![0.0; logits.len()];
    onehot[index] = 1.0;
    (onehot, index)
}

/// Forward value is the candidate picked by `onehot`; θ receives gradient as
/// if the output were Σ pⱼ·candidatesⱼ.
pub fn straight_through_mix(
    tape: &mut Tape,
    probs: Var,
    onehot: &[f64],
    candidates: &[Var],
) -> Result<Var> {
    if candidates.len() != OperationKind::COUNT || onehot.len() != OperationKind::COUNT {
        return Err(Error::Architecture(format!(
            "straight-through mix needs {} candidates, got {}",
            OperationKind::COUNT,
            candidates.len()
        )));
    }
    let index = onehot
        .iter()
        .position(|&v| v == 1.0)
        .ok_or_else(|| Error::Architecture("selection vector is not one-hot".into()))?;
    tape.straight_through(probs, candidates, index)
}

/// softmax(β)-weighted sum of the module outputs feeding one task stream.
/// Order: the task's own modules first, then the shared ones.
pub fn fuse(tape: &mut Tape, beta: Var, outputs: &[Var]) -> Result<Var> {
    if tape.shape(beta) != [outputs.len()] {
        return Err(Error::ShapeMismatch {
            primitive: "fuse",
            lhs: tape.shape(beta).to_vec(),
            rhs: vec![outputs.len()],
        });
    }
    let shape = tape.shape(outputs[0]).to_vec();
    if let Some(bad) = outputs.iter().find(|&&o| tape.shape(o) != &shape[..]) {
        return Err(Error::ShapeMismatch {
            primitive: "fuse",
            lhs: shape,
            rhs: tape.shape(*bad).to_vec(),
        });
    }
    let weights = tape.softmax(beta, 0)?;
    let mut acc: Option<Var> = None;
    for (j, &out) in outputs.iter().enumerate() {
        let w = tape.slice(weights, 0, j, j + 1)?;
        let term = tape.mul(out, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one module output"))
}

/// Temperature over search epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureSchedule {
    Fixed(f64),
    /// τ_e = start·(end/start)^(e/E)
    Exponential { start: f64, end: f64 },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Exponential {
            start: 5.0,
            end: 0.5,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            TemperatureSchedule::Fixed(t) => t,
            TemperatureSchedule::Exponential { start, end } => {
                let frac = if total_epochs == 0 {
                    0.0
                } else {
                    epoch as f64 / total_epochs as f64
                };
                start * (end / start).powf(frac)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TemperatureSchedule::Fixed(t) => t > 0.0 && t.is_finite(),
            TemperatureSchedule::Exponential { start, end } => {
                start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("temperatures must be positive and finite".into()))
        }
    }
}

/// Who a module serves: one task's stream, or every stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleRole {
    Task(usize),
    Shared,
}

impl fmt::Display for ModuleRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleRole::Task(i) => write!(f, "task:{i}"),
            ModuleRole::Shared => f.write_str("shared"),
        }
    }
}

impl FromStr for ModuleRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "shared" {
            return Ok(ModuleRole::Shared);
        }
        s.strip_prefix("task:")
            .and_then(|i| i.parse().ok())
            .map(ModuleRole::Task)
            .ok_or_else(|| Error::Architecture(format!("invalid module role `{s}`")))
    }
}

impl Serialize for ModuleRole {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModuleRole {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn task_key(task: usize) -> String {
    format!("task:{task}")
}

/// Rounds to 9 significant digits, the precision of the serialized form.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

// Fields are declared in lexicographic order so serialization emits sorted keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub op: OperationKind,
    pub role: ModuleRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Per task key, normalized weights over [own modules…, shared modules…].
    pub fusion: BTreeMap<String, Vec<f64>>,
    pub modules: Vec<ModuleSpec>,
}

/// The searched architecture: one operation per module and fusion weights
/// per task per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub hidden_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub n_layers: usize,
    pub n_tasks: usize,
    pub version: u32,
}

pub const ARCHITECTURE_VERSION: u32 = 1;

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        if self.version != ARCHITECTURE_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.n_layers == 0 || self.layers.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.layers.len() != self.n_layers {
            return bad(format!(
                "n_layers is {} but {} layers are listed",
                self.n_layers,
                self.layers.len()
            ));
        }
        if self.n_tasks == 0 {
            return bad("at least one task is required".into());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let shared = layer
                .modules
                .iter()
                .filter(|m| m.role == ModuleRole::Shared)
                .count();
            if layer.fusion.len() != self.n_tasks {
                return bad(format!(
                    "layer {l}: fusion lists {} tasks, expected {}",
                    layer.fusion.len(),
                    self.n_tasks
                ));
            }
            for m in &layer.modules {
                if let ModuleRole::Task(i) = m.role {
                    if i >= self.n_tasks {
                        return bad(format!("layer {l}: module role task:{i} out of range"));
                    }
                }
            }
            for task in 0..self.n_tasks {
                let own = layer
                    .modules
                    .iter()
                    .filter(|m| m.role == ModuleRole::Task(task))
                    .count();
                let Some(w) = layer.fusion.get(&task_key(task)) else {
                    return bad(format!("layer {l}: missing fusion weights for task:{task}"));
                };
                if own == 0 {
                    return bad(format!("layer {l}: task:{task} has no module"));
                }
                if w.len() != own + shared {
                    return bad(format!(
                        "layer {l}: task:{task} fusion has {} weights for {} modules",
                        w.len(),
                        own + shared
                    ));
                }
                let sum: f64 = w.iter().sum();
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return bad(format!(
                        "layer {l}: task:{task} fusion weights must be a distribution, sum {sum}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Operations of the modules with `role` in one layer, in listed order.
    pub fn ops_for(&self, layer: usize, role: ModuleRole) -> Vec<OperationKind> {
        self.layers[layer]
            .modules
            .iter()
            .filter(|m| m.role == role)
            .map(|m| m.op)
            .collect()
    }
}

/// Canonical text: sorted keys, floats rounded to 9 significant digits,
/// trailing newline.
pub fn serialize_architecture(spec: &ArchitectureSpec) -> Result<String> {
    spec.validate()?;
    let mut rounded = spec.clone();
    for layer in &mut rounded.layers {
        for w in layer.fusion.values_mut() {
            w.iter_mut().for_each(|v| *v = round_sig9(*v));
        }
    }
    let mut text = serde_json::to_string_pretty(&rounded)
        .map_err(|e| Error::Architecture(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn deserialize_architecture(text: &str) -> Result<ArchitectureSpec> {
    let spec: ArchitectureSpec = serde_json::from_str(text).map_err(|e| {
        Error::Architecture(format!(
            "malformed architecture at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    spec.validate()?;
    Ok(spec)
}
