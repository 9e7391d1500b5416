use super::{init_uniform, BuildContext, OperationKind, StOperation};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// LSTM over the time axis, one independent recurrence per (batch, node)
/// with shared weights. Gate layout along the 4d axis: input, forget,
/// candidate, output.
pub struct Lstm {
    hidden_dim: usize,
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

impl Lstm {
    pub fn weights(&self) -> (ParamId, ParamId, ParamId) {
        (self.w_input, self.w_hidden, self.bias)
    }
}

pub(super) fn build(
    ctx: &BuildContext<'_>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    let d = ctx.hidden_dim;
    let w_input = init_uniform(store, rng, format!("{}.w_input", ctx.prefix), &[d, 4 * d], d);
    let w_hidden = init_uniform(store, rng, format!("{}.w_hidden", ctx.prefix), &[d, 4 * d], d);
    let mut b = Tensor::zeros(&[4 * d]);
    b.data_mut()[d..2 * d].fill(1.0);
    let bias = store.add(format!("{}.bias", ctx.prefix), ParamGroup::Weight, b);
    Ok(Box::new(Lstm {
        hidden_dim: d,
        w_input,
        w_hidden,
        bias,
    }))
}

impl StOperation for Lstm {
    fn kind(&self) -> OperationKind {
        OperationKind::Rnn
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.w_input, self.w_hidden, self.bias]
    }

    fn forward(&self, sess: &mut Session<'_>, z: Var) -> Result<Var> {
        let wx = sess.param(self.w_input);
        let wh = sess.param(self.w_hidden);
        let b = sess.param(self.bias);
        let tape = &mut sess.tape;
        let shape = tape.shape(z).to_vec();
        let (batch, time, nodes, d) = (shape[0], shape[1], shape[2], shape[3]);
        let rows = batch * nodes;

        // Input projections for every step at once.
        let xw = tape.matmul(z, wx)?;
        let xw = tape.add(xw, b)?;

        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outputs = Vec::with_capacity(time);
        for t in 0..time {
            let step = tape.slice(xw, 1, t, t + 1)?;
            let mut gates = tape.reshape(step, &[rows, 4 * d])?;
            if let Some(h_prev) = h {
                let hw = tape.matmul(h_prev, wh)?;
                gates = tape.add(gates, hw)?;
            }
            let i_pre = tape.slice(gates, 1, 0, d)?;
            let f_pre = tape.slice(gates, 1, d, 2 * d)?;
            let g_pre = tape.slice(gates, 1, 2 * d, 3 * d)?;
            let o_pre = tape.slice(gates, 1, 3 * d, 4 * d)?;
            let i = tape.sigmoid(i_pre)?;
            let g = tape.tanh(g_pre)?;
            let o = tape.sigmoid(o_pre)?;
            let mut c_new = tape.mul(i, g)?;
            if let Some(c_prev) = c {
                let f = tape.sigmoid(f_pre)?;
                let kept = tape.mul(f, c_prev)?;
                c_new = tape.add(kept, c_new)?;
            }
            let c_act = tape.tanh(c_new)?;
            let h_new = tape.mul(o, c_act)?;
            let out = tape.reshape(h_new, &[batch, 1, nodes, d])?;
            outputs.push(out);
            h = Some(h_new);
            c = Some(c_new);
        }
        tape.concat(&outputs, 1)
    }
}
