use super::{init_uniform, BuildContext, OperationKind, StOperation};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Var;

/// Gated dilated causal convolution: (z∗W₃) ⊙ σ(z∗W₄), no bias.
pub struct GatedCausalConv {
    hidden_dim: usize,
    dilation: usize,
    filter: ParamId,
    gate: ParamId,
}

impl GatedCausalConv {
    pub fn filter(&self) -> ParamId {
        self.filter
    }

    pub fn gate(&self) -> ParamId {
        self.gate
    }
}

pub(super) fn build(
    ctx: &BuildContext<'_>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    let d = ctx.hidden_dim;
    let ks = ctx.settings.cnn_kernel.max(1);
    let filter = init_uniform(store, rng, format!("{}.filter", ctx.prefix), &[ks, d, d], ks * d);
    let gate = init_uniform(store, rng, format!("{}.gate", ctx.prefix), &[ks, d, d], ks * d);
    Ok(Box::new(GatedCausalConv {
        hidden_dim: d,
        dilation: ctx.settings.cnn_dilation.max(1),
        filter,
        gate,
    }))
}

impl StOperation for GatedCausalConv {
    fn kind(&self) -> OperationKind {
        OperationKind::Cnn
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.filter, self.gate]
    }

    fn forward(&self, sess: &mut Session<'_>, z: Var) -> Result<Var> {
        let w3 = sess.param(self.filter);
        let w4 = sess.param(self.gate);
        let tape = &mut sess.tape;
        let filtered = tape.conv1d_time(z, w3, self.dilation)?;
        let gate_pre = tape.conv1d_time(z, w4, self.dilation)?;
        let gate = tape.sigmoid(gate_pre)?;
        tape.mul(filtered, gate)
    }
}
