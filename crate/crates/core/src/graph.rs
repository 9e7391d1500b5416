//! Static road/region graph and diffusion convolution over it.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Weighted directed graph with its random-walk transition matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    adjacency: Tensor,
    fwd_transition: Tensor,
    bwd_transition: Tensor,
}

/// Returns (D_O⁻¹A, D_I⁻¹Aᵀ). Rows of zero degree stay all-zero.
pub fn build_transition_matrices(adjacency: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = adjacency.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Graph(format!(
            "adjacency must be square, got shape {shape:?}"
        )));
    }
    let n = shape[0];
    let a = adjacency.data();
    if let Some(pos) = a.iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Graph(format!(
            "adjacency entry ({}, {}) = {} is negative or non-finite",
            pos / n,
            pos % n,
            a[pos]
        )));
    }
    let mut fwd = Tensor::zeros(&[n, n]);
    let mut bwd = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let out_degree: f64 = (0..n).map(|j| a[i * n + j]).sum();
        let in_degree: f64 = (0..n).map(|j| a[j * n + i]).sum();
        for j in 0..n {
            if out_degree > 0.0 {
                fwd.data_mut()[i * n + j] = a[i * n + j] / out_degree;
            }
            if in_degree > 0.0 {
                bwd.data_mut()[i * n + j] = a[j * n + i] / in_degree;
            }
        }
    }
    Ok((fwd, bwd))
}

fn matmul_square(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for k in 0..n {
            let av = a.data()[i * n + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] += av * b.data()[k * n + j];
            }
        }
    }
    out
}

impl Graph {
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let (fwd_transition, bwd_transition) = build_transition_matrices(&adjacency)?;
        let n_nodes = adjacency.shape()[0];
        if n_nodes == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        Ok(Graph {
            n_nodes,
            adjacency,
            fwd_transition,
            bwd_transition,
        })
    }

    /// Builds an N-node graph from weighted directed edges.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj = Tensor::zeros(&[n_nodes, n_nodes]);
        for &(src, dst, w) in edges {
            if src >= n_nodes || dst >= n_nodes {
                return Err(Error::Graph(format!(
                    "edge ({src}, {dst}) references a node outside 0..{n_nodes}"
                )));
            }
            adj.data_mut()[src * n_nodes + dst] += w;
        }
        Self::from_adjacency(adj)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn fwd_transition(&self) -> &Tensor {
        &self.fwd_transition
    }

    pub fn bwd_transition(&self) -> &Tensor {
        &self.bwd_transition
    }

    /// Positive-weight directed edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_nodes;
        (0..n * n)
            .filter(|&i| self.adjacency.data()[i] > 0.0)
            .map(|i| (i / n, i % n, self.adjacency.data()[i]))
            .collect()
    }

    /// [(P_fᵏ, P_bᵏ) for k = 0..=steps], with P⁰ = I.
    pub fn transition_powers(&self, steps: usize) -> Vec<(Tensor, Tensor)> {
        let mut out = vec![(Tensor::eye(self.n_nodes), Tensor::eye(self.n_nodes))];
        for k in 1..=steps {
            let (pf, pb) = &out[k - 1];
            let next = (
                matmul_square(pf, &self.fwd_transition),
                matmul_square(pb, &self.bwd_transition),
            );
            out.push(next);
        }
        out
    }
}

/// Filter matrices of a diffusion convolution, already bound to a tape.
/// `w1[k]`, `w2[k]` multiply the forward and backward k-step diffusions.
#[derive(Clone, Debug)]
pub struct DiffusionWeights {
    pub w1: Vec<Var>,
    pub w2: Vec<Var>,
}

impl DiffusionWeights {
    pub fn steps(&self) -> usize {
        self.w1.len().saturating_sub(1)
    }
}

/// out = Σₖ P_fᵏ Z W₁ₖ + P_bᵏ Z W₂ₖ over each (batch, time) slice of
/// `z` shaped (B, T, N, d_in). `powers` comes from [`Graph::transition_powers`].
pub fn diffusion_conv(
    tape: &mut Tape,
    z: Var,
    powers: &[(Var, Var)],
    weights: &DiffusionWeights,
) -> Result<Var> {
    let z_shape = tape.shape(z).to_vec();
    if weights.w1.len() != weights.w2.len() || weights.w1.is_empty() {
        return Err(Error::Graph(
            "diffusion weights need matching non-empty forward/backward lists".into(),
        ));
    }
    if powers.len() < weights.w1.len() {
        return Err(Error::Graph(format!(
            "need {} transition powers, have {}",
            weights.w1.len(),
            powers.len()
        )));
    }
    let n = tape.shape(powers[0].0)[0];
    if z_shape.len() != 4 || z_shape[2] != n {
        return Err(Error::Graph(format!(
            "feature block {z_shape:?} does not match a graph of {n} nodes"
        )));
    }
    let mut out: Option<Var> = None;
    for (k, (pf, pb)) in powers.iter().take(weights.w1.len()).enumerate() {
        let (zf, zb) = if k == 0 {
            (z, z)
        } else {
            (tape.matmul(*pf, z)?, tape.matmul(*pb, z)?)
        };
        let a = tape.matmul(zf, weights.w1[k])?;
        let b = tape.matmul(zb, weights.w2[k])?;
        let term = tape.add(a, b)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(out.expect("at least one diffusion step"))
}
