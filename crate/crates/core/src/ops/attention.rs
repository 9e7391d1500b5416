use serde::{Deserialize, Serialize};

use super::{init_uniform, BuildContext, OperationKind, StOperation};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Query sampling applied before the attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSampling {
    /// Every query attends (ψ = identity).
    #[default]
    Dense,
    /// Only the ⌈ln L⌉ queries with the largest max-minus-mean score keep
    /// their attention output; the rest emit the mean of the values.
    TopU,
}

/// Single-head scaled dot-product attention, over time (TX) or over
/// nodes (TX_S).
pub struct AttentionOp {
    kind: OperationKind,
    hidden_dim: usize,
    sampling: AttentionSampling,
    w_query: ParamId,
    w_key: ParamId,
    w_value: ParamId,
}

impl AttentionOp {
    pub fn projections(&self) -> (ParamId, ParamId, ParamId) {
        (self.w_query, self.w_key, self.w_value)
    }
}

fn build(
    kind: OperationKind,
    ctx: &BuildContext<'_>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    let d = ctx.hidden_dim;
    let w_query = init_uniform(store, rng, format!("{}.w_query", ctx.prefix), &[d, d], d);
    let w_key = init_uniform(store, rng, format!("{}.w_key", ctx.prefix), &[d, d], d);
    let w_value = init_uniform(store, rng, format!("{}.w_value", ctx.prefix), &[d, d], d);
    Ok(Box::new(AttentionOp {
        kind,
        hidden_dim: d,
        sampling: ctx.settings.attention,
        w_query,
        w_key,
        w_value,
    }))
}

pub(super) fn build_temporal(
    ctx: &BuildContext<'_>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    build(OperationKind::Tx, ctx, store, rng)
}

pub(super) fn build_spatial(
    ctx: &BuildContext<'_>,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Box<dyn StOperation>> {
    build(OperationKind::TxS, ctx, store, rng)
}

/// Number of queries kept in top-u mode for a sequence of length `len`.
pub fn sampled_queries(len: usize) -> usize {
    ((len as f64).ln().ceil() as usize).clamp(1, len.max(1))
}

/// Attention along axis 2 of `x` shaped (B, A, L, d): each of the B·A
/// sequences of length L attends over itself.
pub(crate) fn attend(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    sampling: AttentionSampling,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = shape[3];
    let len = shape[2];
    if d == 0 {
        return Err(Error::Config("attention feature dim must be positive".into()));
    }
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let raw = tape.bmm(q, kt)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores, 3)?;
    let attended = tape.bmm(weights, v)?;
    match sampling {
        AttentionSampling::Dense => Ok(attended),
        AttentionSampling::TopU => {
            let keep = query_mask(tape.value(scores), sampled_queries(len), d);
            let drop = {
                let mut t = keep.clone();
                t.data_mut().iter_mut().for_each(|m| *m = 1.0 - *m);
                t
            };
            let averaging = Tensor::full(&[len, len], 1.0 / len as f64);
            let averaging = tape.constant(averaging);
            let mean_v = tape.matmul(averaging, v)?;
            let keep = tape.constant(keep);
            let drop = tape.constant(drop);
            let kept = tape.mul(attended, keep)?;
            let filled = tape.mul(mean_v, drop)?;
            tape.add(kept, filled)
        }
    }
}

/// 0/1 mask shaped (B, A, L, d) selecting the `u` queries per sequence with
/// the largest max-minus-mean score; ties go to the lower index.
fn query_mask(scores: &Tensor, u: usize, d: usize) -> Tensor {
    let s = scores.shape();
    let (b, a, len) = (s[0], s[1], s[2]);
    let mut mask = Tensor::zeros(&[b, a, len, d]);
    for seq in 0..b * a {
        let block = &scores.data()[seq * len * len..(seq + 1) * len * len];
        let mut sparsity: Vec<(usize, f64)> = (0..len)
            .map(|i| {
                let row = &block[i * len..(i + 1) * len];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mean = row.iter().sum::<f64>() / len as f64;
                (i, max - mean)
            })
            .collect();
        sparsity.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(i, _) in sparsity.iter().take(u) {
            let off = (seq * len + i) * d;
            mask.data_mut()[off..off + d].fill(1.0);
        }
    }
    mask
}

impl StOperation for AttentionOp {
    fn kind(&self) -> OperationKind {
        self.kind
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.w_query, self.w_key, self.w_value]
    }

    fn forward(&self, sess: &mut Session<'_>, z: Var) -> Result<Var> {
        let wq = sess.param(self.w_query);
        let wk = sess.param(self.w_key);
        let wv = sess.param(self.w_value);
        let tape = &mut sess.tape;
        match self.kind {
            // (B,T,N,d) → (B,N,T,d): attend over time per node.
            OperationKind::Tx => {
                let x = tape.permute(z, &[0, 2, 1, 3])?;
                let y = attend(tape, x, wq, wk, wv, self.sampling)?;
                tape.permute(y, &[0, 2, 1, 3])
            }
            // Already (B,T,N,d): attend over nodes per time step.
            _ => attend(tape, z, wq, wk, wv, self.sampling),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_query_count() {
        assert_eq!(sampled_queries(1), 1);
        assert_eq!(sampled_queries(12), 3);
        assert_eq!(sampled_queries(20), 3);
        assert_eq!(sampled_queries(2), 1);
    }

    #[test]
    fn mask_prefers_peaked_rows() {
        // Two queries over two keys: row 1 is peaked, row 0 flat.
        let scores = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.0, 5.0, -5.0]).unwrap();
        let m = query_mask(&scores, 1, 3);
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
