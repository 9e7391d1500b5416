mod common;

use common::{random_graph, rng, uniform};
use proptest::prelude::*;
use stmtl::graph::{build_transition_matrices, diffusion_conv, DiffusionWeights, Graph};
use stmtl::tensor::{finite_difference_check_many, Tape, Tensor, Var};

fn m(rows: &[&[f64]]) -> Tensor {
    let n = rows.len();
    Tensor::new(vec![n, rows[0].len()], rows.concat()).unwrap()
}

#[test]
fn transition_examples() {
    let (pf, pb) = build_transition_matrices(&m(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap();
    assert_eq!(pf, m(&[&[0.0, 1.0], &[0.0, 0.0]]));
    assert_eq!(pb, m(&[&[0.0, 0.0], &[1.0, 0.0]]));
    let (pf, _) = build_transition_matrices(&m(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap();
    assert_eq!(pf, m(&[&[0.0, 1.0], &[1.0, 0.0]]));
}

/// Runs diffusion conv with the graph's transition powers and the given weights.
fn conv(graph: &Graph, z: &Tensor, w1: &[Tensor], w2: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let powers: Vec<(Var, Var)> = graph
        .transition_powers(w1.len() - 1)
        .into_iter()
        .map(|(f, b)| (tape.constant(f), tape.constant(b)))
        .collect();
    let weights = DiffusionWeights {
        w1: w1.iter().map(|w| tape.constant(w.clone())).collect(),
        w2: w2.iter().map(|w| tape.constant(w.clone())).collect(),
    };
    let out = diffusion_conv(&mut tape, zv, &powers, &weights).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_input_gives_zero_output() {
    let g = random_graph(5, 0.5, &mut rng(1));
    let mut r = rng(2);
    let w: Vec<Tensor> = (0..3).map(|_| uniform(&[3, 3], -1.0, 1.0, &mut r)).collect();
    let out = conv(&g, &Tensor::zeros(&[2, 3, 5, 3]), &w, &w);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_steps_with_identity_weights_doubles_input() {
    let g = random_graph(4, 0.5, &mut rng(3));
    let z = uniform(&[2, 3, 4, 3], -1.0, 1.0, &mut rng(4));
    let out = conv(&g, &z, &[Tensor::eye(3)], &[Tensor::eye(3)]);
    for (o, x) in out.data().iter().zip(z.data()) {
        assert_eq!(*o, 2.0 * x);
    }
}

#[test]
fn two_node_hand_example() {
    // A = [[0,1],[0,0]]: P_f = [[0,1],[0,0]], P_b = [[0,0],[1,0]].
    // out = 2z + P_f z + P_b z = [2z₁ + z₂, 2z₂ + z₁].
    let g = Graph::from_adjacency(m(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap();
    let one = Tensor::full(&[1, 1], 1.0);
    let z = Tensor::new(vec![1, 1, 2, 1], vec![3.0, 5.0]).unwrap();
    let out = conv(&g, &z, &[one.clone(), one.clone()], &[one.clone(), one]);
    assert_eq!(out.data(), &[2.0 * 3.0 + 5.0, 2.0 * 5.0 + 3.0]);
}

#[test]
fn one_step_diffusion_stays_within_one_hop() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let n = 3 + (seed as usize % 8);
        let g = random_graph(n, 0.3, &mut r);
        let d = 2;
        let w1: Vec<Tensor> = (0..2).map(|_| uniform(&[d, d], -1.0, 1.0, &mut r)).collect();
        let w2: Vec<Tensor> = (0..2).map(|_| uniform(&[d, d], -1.0, 1.0, &mut r)).collect();
        let z = uniform(&[1, 1, n, d], -1.0, 1.0, &mut r);
        let base = conv(&g, &z, &w1, &w2);
        let a = g.adjacency();
        for j in 0..n {
            let mut zp = z.clone();
            zp.data_mut()[j * d] += 1.0;
            let out = conv(&g, &zp, &w1, &w2);
            for i in 0..n {
                let changed = (0..d).any(|c| out.data()[i * d + c] != base.data()[i * d + c]);
                let linked = i == j || a.at(&[i, j]) != 0.0 || a.at(&[j, i]) != 0.0;
                assert!(!changed || linked, "seed {seed}: node {j} reached {i} without an edge");
            }
        }
    }
}

#[test]
fn diffusion_conv_passes_gradcheck() {
    let g = random_graph(4, 0.6, &mut rng(7));
    let mut r = rng(8);
    let mut inputs = vec![uniform(&[2, 2, 4, 3], -1.0, 1.0, &mut r)];
    for _ in 0..6 {
        inputs.push(uniform(&[3, 3], -1.0, 1.0, &mut r));
    }
    let powers = g.transition_powers(2);
    let err = finite_difference_check_many(
        |tape, v| {
            let pw: Vec<(Var, Var)> = powers
                .iter()
                .map(|(f, b)| (tape.constant(f.clone()), tape.constant(b.clone())))
                .collect();
            let weights = DiffusionWeights {
                w1: v[1..4].to_vec(),
                w2: v[4..7].to_vec(),
            };
            let y = diffusion_conv(tape, v[0], &pw, &weights)?;
            let y = tape.tanh(y)?;
            tape.sum_all(y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permutation_equivariance(seed in 0u64..10_000, n in 2usize..8) {
        let mut r = rng(seed);
        let g = random_graph(n, 0.4, &mut r);
        let d = 2;
        let w1: Vec<Tensor> = (0..3).map(|_| uniform(&[d, d], -1.0, 1.0, &mut r)).collect();
        let w2: Vec<Tensor> = (0..3).map(|_| uniform(&[d, d], -1.0, 1.0, &mut r)).collect();
        let z = uniform(&[2, 2, n, d], -1.0, 1.0, &mut r);
        // perm[i] is the new label of node i.
        let perm: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % n).collect();
        prop_assume!({
            let mut s = perm.clone();
            s.sort();
            s == (0..n).collect::<Vec<_>>()
        });
        let edges: Vec<(usize, usize, f64)> = g.edges().into_iter().map(|(a, b, w)| (perm[a], perm[b], w)).collect();
        let gp = Graph::from_edges(n, &edges).unwrap();
        let mut zp = Tensor::zeros(z.shape());
        for bt in 0..4 {
            for i in 0..n {
                for c in 0..d {
                    zp.data_mut()[(bt * n + perm[i]) * d + c] = z.data()[(bt * n + i) * d + c];
                }
            }
        }
        let out = conv(&g, &z, &w1, &w2);
        let outp = conv(&gp, &zp, &w1, &w2);
        for bt in 0..4 {
            for i in 0..n {
                for c in 0..d {
                    let a = out.data()[(bt * n + i) * d + c];
                    let b = outp.data()[(bt * n + perm[i]) * d + c];
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn transition_rows_are_stochastic_or_zero(seed in 0u64..10_000, n in 1usize..9) {
        let g = random_graph(n, 0.4, &mut rng(seed));
        for p in [g.fwd_transition(), g.bwd_transition()] {
            for i in 0..n {
                let s: f64 = (0..n).map(|j| p.at(&[i, j])).sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }
    }
}
