mod common;

use std::sync::Arc;

use common::{random_graph, rng, store_gradcheck, uniform, weighted_sum};
use stmtl::checkpoint::Checkpoint;
use stmtl::graph::Graph;
use stmtl::model::{uniform_architecture, ForwardMode, Model, ModelConfig};
use stmtl::ops::{OperationKind, OperationRegistry};
use stmtl::params::{ParamGroup, Session};
use stmtl::search::ModuleRole;
use stmtl::tensor::Tensor;
use stmtl::train::{loss_and_grads, train_step, Adam, AdamConfig, Batch};

use OperationKind::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 4,
        history: 4,
        ..Default::default()
    }
}

fn fixed(cfg: &ModelConfig, ops: &[OperationKind], graph: Arc<Graph>, seed: u64) -> Model {
    let spec = uniform_architecture(cfg, ops).unwrap();
    Model::from_architecture(&spec, cfg, graph, &mut rng(seed)).unwrap()
}

fn searchable(cfg: &ModelConfig, graph: Arc<Graph>, seed: u64) -> Model {
    Model::searchable(cfg, cfg.hidden_dim, graph, &OperationRegistry::standard(), &mut rng(seed)).unwrap()
}

fn batch(cfg: &ModelConfig, b: usize, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    Batch {
        x: uniform(&[b, cfg.history, n, cfg.n_tasks], -1.0, 1.0, &mut r),
        targets: (0..cfg.n_tasks).map(|_| uniform(&[b, n], -1.0, 1.0, &mut r)).collect(),
    }
}

const SEARCH: ForwardMode = ForwardMode::Search {
    temperature: 1.0,
    noise: false,
};

#[test]
fn shared_bottom_example() {
    let cfg = tiny_config();
    let mut model = fixed(&cfg, &[Gcn, Rnn], random_graph(3, 0.5, &mut rng(1)), 2);
    let w = Tensor::new(vec![2, 4], vec![1.0, -1.0, 0.5, 0.0, 2.0, 1.0, -0.5, 0.0]).unwrap();
    *model.store.get_mut(model.bottom.weight) = w;
    *model.store.get_mut(model.bottom.bias) = Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.25]);
    // One entry with features (1, 2): pre-activation (5, 1, -0.5, 0.25).
    let mut x = Tensor::zeros(&[1, 4, 3, 2]);
    x.set(&[0, 0, 0, 0], 1.0);
    x.set(&[0, 0, 0, 1], 2.0);
    let mut sess = Session::new(&model.store);
    let xv = sess.constant(x);
    let z = model.shared_bottom_forward(&mut sess, xv).unwrap();
    let z = sess.tape.value(z);
    assert_eq!(z.shape(), &[1, 4, 3, 4]);
    assert_eq!(&z.data()[..4], &[5.0, 1.0, 0.0, 0.25]);
    // Zero input gives relu(bias) everywhere else.
    assert_eq!(&z.data()[4..8], &[0.0, 0.0, 0.0, 0.25]);
}

#[test]
fn tower_example() {
    let cfg = tiny_config();
    let mut model = fixed(&cfg, &[Gcn, Rnn], random_graph(3, 0.5, &mut rng(1)), 2);
    let flat = cfg.history * cfg.hidden_dim;
    *model.store.get_mut(model.towers[1].weight) = Tensor::new(vec![flat, 1], (0..flat).map(|i| i as f64).collect()).unwrap();
    *model.store.get_mut(model.towers[1].bias) = Tensor::from_vec(vec![0.5]);
    let z = uniform(&[2, cfg.history, 3, cfg.hidden_dim], -1.0, 1.0, &mut rng(3));
    let mut sess = Session::new(&model.store);
    let zv = sess.constant(z.clone());
    let y = model.tower_forward(&mut sess, 1, zv).unwrap();
    let y = sess.tape.value(y);
    assert_eq!(y.shape(), &[2, 3]);
    for b in 0..2 {
        for n in 0..3 {
            let mut want = 0.5;
            for t in 0..cfg.history {
                for c in 0..cfg.hidden_dim {
                    want += z.at(&[b, t, n, c]) * (t * cfg.hidden_dim + c) as f64;
                }
            }
            assert!((y.at(&[b, n]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_the_composition_of_its_stages() {
    let cfg = tiny_config();
    let g = random_graph(3, 0.5, &mut rng(4));
    let model = fixed(&cfg, &[Tx, Cnn], g, 5);
    let x = batch(&cfg, 2, 3, 6).x;
    let mut sess = Session::new(&model.store);
    let xv = sess.constant(x.clone());
    let z0 = model.shared_bottom_forward(&mut sess, xv).unwrap();
    let mut streams = vec![z0, z0];
    for layer in &model.layers {
        streams = model.hidden_layer_forward(&mut sess, layer, &streams, ForwardMode::Fixed, &mut rng(0)).unwrap();
    }
    let manual: Vec<Tensor> = (0..2)
        .map(|t| {
            let y = model.tower_forward(&mut sess, t, streams[t]).unwrap();
            sess.tape.value(y).clone()
        })
        .collect();
    let direct = model.predict(&x, ForwardMode::Fixed, &mut rng(0)).unwrap();
    assert_eq!(manual, direct);
}

#[test]
fn equal_module_outputs_pass_through_fusion() {
    // With every module fed the same stream and computing the same function,
    // fusion returns that output whatever β is.
    let cfg = ModelConfig {
        n_layers: 1,
        ..tiny_config()
    };
    let g = random_graph(3, 0.5, &mut rng(7));
    let mut model = fixed(&cfg, &[Cnn], g, 8);
    let layer = &model.layers[0];
    let ids: Vec<_> = layer.modules.iter().map(|m| m.params()).collect();
    for other in &ids[1..] {
        for (src, dst) in ids[0].iter().zip(other) {
            let v = model.store.get(*src).clone();
            *model.store.get_mut(*dst) = v;
        }
    }
    for id in model.fusion_params() {
        *model.store.get_mut(id) = Tensor::from_vec(vec![2.3, -1.1]);
    }
    let z = uniform(&[1, cfg.history, 3, cfg.hidden_dim], -1.0, 1.0, &mut rng(9));
    let mut sess = Session::new(&model.store);
    let zv = sess.constant(z);
    let out = model.hidden_layer_forward(&mut sess, &model.layers[0], &[zv, zv], ForwardMode::Fixed, &mut rng(0)).unwrap();
    let op_out = {
        let stmtl::model::ModuleOps::Fixed(op) = &model.layers[0].modules[0].ops else { unreachable!() };
        stmtl::ops::apply(op.as_ref(), &mut sess, zv).unwrap()
    };
    for o in out {
        assert!(sess.tape.value(o).max_abs_diff(sess.tape.value(op_out)) < 1e-12);
    }
}

#[test]
fn single_task_model_runs() {
    let cfg = ModelConfig {
        n_tasks: 1,
        ..tiny_config()
    };
    let model = fixed(&cfg, &[Rnn, TxS], random_graph(3, 0.5, &mut rng(10)), 11);
    let preds = model.predict(&batch(&cfg, 2, 3, 12).x, ForwardMode::Fixed, &mut rng(0)).unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!(preds[0].shape(), &[2, 3]);
}

#[test]
fn shared_step_from_one_task_moves_the_other() {
    let cfg = tiny_config();
    let mut model = fixed(&cfg, &[Gcn, Cnn], random_graph(3, 0.6, &mut rng(13)), 14);
    let b = batch(&cfg, 2, 3, 15);
    let before = model.predict(&b.x, ForwardMode::Fixed, &mut rng(0)).unwrap();
    let mut opt = Adam::new(model.shared_params(), &model.store, AdamConfig { lr: 1e-2, ..Default::default() });
    train_step(&mut model, &b, &mut opt, ForwardMode::Fixed, &[1.0, 0.0], &mut rng(0)).unwrap();
    let after = model.predict(&b.x, ForwardMode::Fixed, &mut rng(0)).unwrap();
    assert!(after[1].max_abs_diff(&before[1]) > 1e-6);
}

#[test]
fn task_loss_does_not_reach_other_task_params() {
    let cfg = tiny_config();
    for shared in [1, 0] {
        let cfg = ModelConfig {
            shared_modules: shared,
            ..cfg.clone()
        };
        let model = fixed(&cfg, &[Gcn, Rnn], random_graph(3, 0.6, &mut rng(16)), 17);
        let b = batch(&cfg, 2, 3, 18);
        let all: Vec<_> = model.store.ids_in(ParamGroup::Weight);
        let (_, grads) = loss_and_grads(&model, &b, &all, ForwardMode::Fixed, &[1.0, 0.0], &mut rng(0)).unwrap();
        for id in model.task_params(1) {
            assert!(grads.is_zero(id), "{} got gradient", model.store.name(id));
        }
        assert!(model.task_params(0).iter().any(|&id| !grads.is_zero(id)));
        assert!(!grads.is_zero(model.bottom.weight));
    }
}

#[test]
fn without_shared_modules_tasks_only_meet_at_the_bottom() {
    let cfg = ModelConfig {
        shared_modules: 0,
        ..tiny_config()
    };
    let mut model = fixed(&cfg, &[Cnn, Tx], random_graph(3, 0.6, &mut rng(19)), 20);
    assert!(model.shared_params().is_empty());
    let x = batch(&cfg, 2, 3, 21).x;
    let before = model.predict(&x, ForwardMode::Fixed, &mut rng(0)).unwrap();
    for id in model.task_params(1) {
        model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3);
    }
    let after = model.predict(&x, ForwardMode::Fixed, &mut rng(0)).unwrap();
    assert_eq!(after[0], before[0]);
    assert!(after[1].max_abs_diff(&before[1]) > 1e-6);
}

#[test]
fn fixed_model_is_smaller_than_searchable() {
    let cfg = tiny_config();
    let g = random_graph(4, 0.5, &mut rng(22));
    let s = searchable(&cfg, g.clone(), 23);
    let f = fixed(&cfg, &[Rnn, Rnn], g, 23);
    assert!(f.store.count(ParamGroup::Weight) < s.store.count(ParamGroup::Weight));
    assert_eq!(s.selector_params().len(), 2 * 3);
    assert!(f.selector_params().is_empty());
    assert!(s.is_searchable() && !f.is_searchable());
}

#[test]
fn end_to_end_gradcheck() {
    let cfg = tiny_config();
    let g = random_graph(3, 0.7, &mut rng(24));
    let b = batch(&cfg, 2, 3, 25);
    for ops in [[Gcn, Rnn], [Cnn, Tx], [TxS, Gcn]] {
        let model = fixed(&cfg, &ops, g.clone(), 26);
        let ids = model.store.ids().collect::<Vec<_>>();
        let err = store_gradcheck(
            &model.store,
            &ids,
            |sess| {
                let x = sess.constant(b.x.clone());
                let preds = model.forward(sess, x, ForwardMode::Fixed, &mut rng(0))?;
                let a = weighted_sum(sess, preds[0], 27)?;
                let c = weighted_sum(sess, preds[1], 28)?;
                sess.tape.add(a, c)
            },
            1e-6,
        );
        assert!(err < 1e-4, "{ops:?}: relative error {err}");
    }
}

#[test]
fn architecture_round_trips_through_a_model() {
    let cfg = ModelConfig {
        n_layers: 3,
        ..tiny_config()
    };
    let spec = uniform_architecture(&cfg, &[Gcn, Gcn, Rnn]).unwrap();
    let model = Model::from_architecture(&spec, &cfg, random_graph(3, 0.5, &mut rng(29)), &mut rng(30)).unwrap();
    assert_eq!(model.derive_architecture(), spec);
    assert_eq!(model.layers[2].modules[2].role, ModuleRole::Shared);

    let short = ModelConfig {
        n_layers: 2,
        ..cfg
    };
    assert!(Model::from_architecture(&spec, &short, random_graph(3, 0.5, &mut rng(29)), &mut rng(30)).is_err());
}

#[test]
fn derived_operations_follow_the_logits() {
    let cfg = tiny_config();
    let mut model = searchable(&cfg, random_graph(3, 0.5, &mut rng(31)), 32);
    let spec = model.derive_architecture();
    assert!(spec.layers.iter().flat_map(|l| &l.modules).all(|m| m.op == Gcn));
    let first = model.selector_params()[0];
    *model.store.get_mut(first) = Tensor::from_vec(vec![0.1, 3.0, 0.2, 0.1, 0.1]);
    assert_eq!(model.derive_architecture().layers[0].modules[0].op, Rnn);
}

#[test]
fn construction_and_forward_are_deterministic() {
    let cfg = tiny_config();
    let g = random_graph(4, 0.5, &mut rng(33));
    let a = searchable(&cfg, g.clone(), 34);
    let b = searchable(&cfg, g, 34);
    let x = batch(&cfg, 2, 4, 35).x;
    let mode = ForwardMode::Search {
        temperature: 1.0,
        noise: true,
    };
    assert_eq!(a.predict(&x, mode, &mut rng(36)).unwrap(), b.predict(&x, mode, &mut rng(36)).unwrap());
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let cfg = tiny_config();
    let mut model = fixed(&cfg, &[Gcn, Cnn], random_graph(3, 0.6, &mut rng(37)), 38);
    let b = batch(&cfg, 4, 3, 39);
    let mut opt = Adam::new(
        model.store.ids_in(ParamGroup::Weight),
        &model.store,
        AdamConfig { lr: 1e-2, ..Default::default() },
    );
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_step(&mut model, &b, &mut opt, ForwardMode::Fixed, &[1.0, 1.0], &mut rng(0)).unwrap());
    }
    assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn checkpoints_restore_identical_models() {
    let cfg = tiny_config();
    let g = random_graph(3, 0.5, &mut rng(40));
    let x = batch(&cfg, 2, 3, 41).x;
    for (model, mode) in [
        (searchable(&cfg, g.clone(), 42), SEARCH),
        (fixed(&cfg, &[Tx, Rnn], g.clone(), 43), ForwardMode::Fixed),
    ] {
        let text = Checkpoint::from_model(&model, "test").to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap().restore(g.clone()).unwrap();
        for (p, q) in model.store.params().iter().zip(back.store.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        assert_eq!(model.predict(&x, mode, &mut rng(0)).unwrap(), back.predict(&x, mode, &mut rng(0)).unwrap());
    }
    assert!(Checkpoint::from_json("{\"version\": 1}").is_err());
}
