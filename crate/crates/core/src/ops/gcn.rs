use std::sync::Arc;

use super::{init_uniform, BuildContext, OperationKind, StOperation};
use crate::error::{Error, Result};
use crate::graph::{diffusion_conv, DiffusionWeights, Graph};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Diffusion convolution with bidirectional K-step random walks.
pub struct DiffusionConvOp {
    hidden_dim: usize,
    graph: Arc<Graph>,
    powers: Vec<(Tensor, Tensor)>,
    w1: Vec<ParamId>,
    w2: Vec<ParamId>,
}

impl DiffusionConvOp {
    pub fn steps(&self) -> usize {
        self.w1.len() - 1
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn forward_weights(&self) -> &[ParamId] {
        &self.w1
    }

    pub fn backward_weights(&self) -> &[ParamId] {
        &self.w2
    }
}

pub(super) fn build(
    ctx: &BuildContext<'_>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    let graph = ctx
        .graph
        .ok_or_else(|| Error::Config("GCN operation requires a graph".into()))?
        .clone();
    let d = ctx.hidden_dim;
    let steps = ctx.settings.diffusion_steps;
    let mut w1 = Vec::with_capacity(steps + 1);
    let mut w2 = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        w1.push(init_uniform(store, rng, format!("{}.w_fwd{k}", ctx.prefix), &[d, d], d));
        w2.push(init_uniform(store, rng, format!("{}.w_bwd{k}", ctx.prefix), &[d, d], d));
    }
    let powers = graph.transition_powers(steps);
    Ok(Box::new(DiffusionConvOp {
        hidden_dim: d,
        graph,
        powers,
        w1,
        w2,
    }))
}

impl StOperation for DiffusionConvOp {
    fn kind(&self) -> OperationKind {
        OperationKind::Gcn
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn params(&self) -> Vec<ParamId> {
        self.w1.iter().chain(&self.w2).copied().collect()
    }

    fn forward(&self, sess: &mut Session<'_>, z: Var) -> Result<Var> {
        let powers: Vec<(Var, Var)> = self
            .powers
            .iter()
            .map(|(f, b)| (sess.constant(f.clone()), sess.constant(b.clone())))
            .collect();
        let weights = DiffusionWeights {
            w1: self.w1.iter().map(|&id| sess.param(id)).collect(),
            w2: self.w2.iter().map(|&id| sess.param(id)).collect(),
        };
        diffusion_conv(&mut sess.tape, z, &powers, &weights)
    }
}
