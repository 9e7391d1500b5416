#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng as _;
use stmtl::graph::Graph;
use stmtl::params::{ParamId, ParamStore, Session};
use stmtl::rng::{self, Rng};
use stmtl::tensor::{Tensor, Var};
use stmtl::Result;

pub fn rng(seed: u64) -> Rng {
    rng::stream(seed, "tests")
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random undirected graph with positive weights.
pub fn random_graph(n: usize, p: f64, rng: &mut Rng) -> Arc<Graph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                let w = rng.random_range(0.5..2.0);
                edges.push((i, j, w));
                edges.push((j, i, w));
            }
        }
    }
    Arc::new(Graph::from_edges(n, &edges).unwrap())
}

pub fn ring(n: usize) -> Arc<Graph> {
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n, 1.0));
        edges.push(((i + 1) % n, i, 1.0));
    }
    Arc::new(Graph::from_edges(n, &edges).unwrap())
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central-difference check of `f` w.r.t. the listed store parameters.
pub fn store_gradcheck<F>(store: &ParamStore, ids: &[ParamId], f: F, eps: f64) -> f64
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let mut sess = Session::new(store).train_only(ids);
    let loss = f(&mut sess).unwrap();
    let grads = sess.backward(loss).unwrap();
    let eval = |s: &ParamStore| {
        let mut sess = Session::new(s);
        let l = f(&mut sess).unwrap();
        sess.tape.value(l).item().unwrap()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(grads.get(id)[i], (plus - minus) / (2.0 * eps)));
        }
    }
    worst
}

/// Σ c ⊙ y with fixed random coefficients, so every output entry matters.
pub fn weighted_sum(sess: &mut Session<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = sess.tape.shape(y).to_vec();
    let c = uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let c = sess.constant(c);
    let p = sess.tape.mul(y, c)?;
    sess.tape.sum_all(p)
}
