mod common;

use std::fs;
use std::path::Path;

use proptest::prelude::*;
use stmtl::data::{
    cross_task_correlation, generate_synthetic, load_dataset, make_windows, save_dataset, split, GraphModel,
    Normalizer, SyntheticConfig,
};
use stmtl::train::PreparedData;
use stmtl::Error;

fn synth(coupling: f64, noise: f64, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        nodes: 6,
        length: 400,
        coupling,
        noise,
        seed,
        ..Default::default()
    }
}

#[test]
fn full_coupling_without_noise_gives_identical_tasks() {
    let ds = generate_synthetic(&SyntheticConfig {
        ar_scale: 0.05,
        ..synth(1.0, 0.0, 1)
    })
    .unwrap();
    assert_eq!(ds.task_series(0), ds.task_series(1));
    assert!((cross_task_correlation(&ds) - 1.0).abs() < 1e-12);
}

#[test]
fn zero_coupling_gives_uncorrelated_tasks() {
    let ds = generate_synthetic(&SyntheticConfig {
        length: 2000,
        ..synth(0.0, 0.02, 2)
    })
    .unwrap();
    assert!(cross_task_correlation(&ds).abs() < 0.1);
}

#[test]
fn correlation_rises_with_coupling() {
    let mean = |rho: f64| (0..5).map(|s| cross_task_correlation(&generate_synthetic(&synth(rho, 0.02, s)).unwrap())).sum::<f64>() / 5.0;
    let (a, b, c) = (mean(0.0), mean(0.5), mean(1.0));
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn generation_is_seeded() {
    let a = generate_synthetic(&synth(0.8, 0.02, 3)).unwrap();
    let b = generate_synthetic(&synth(0.8, 0.02, 3)).unwrap();
    let c = generate_synthetic(&synth(0.8, 0.02, 4)).unwrap();
    assert_eq!(a.features(), b.features());
    assert_eq!(a.graph().edges(), b.graph().edges());
    assert_ne!(a.features(), c.features());
}

#[test]
fn ring_graph_has_two_neighbours_per_node() {
    let ds = generate_synthetic(&SyntheticConfig {
        graph: GraphModel::Ring,
        ..synth(0.8, 0.02, 5)
    })
    .unwrap();
    assert_eq!(ds.graph().edges().len(), 2 * 6);
}

fn write(dir: &Path, features: &str, graph: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let f = dir.join("features.csv");
    let g = dir.join("graph.csv");
    fs::write(&f, features).unwrap();
    fs::write(&g, graph).unwrap();
    (f, g)
}

const GRAPH: &str = "src,dst,weight\n0,1,1.0\n1,0,0.5\n";

#[test]
fn csv_fixture_loads_in_any_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let (f, g) = write(dir.path(), "t,node,flow\n1,1,4.0\n0,0,1.0\n1,0,3.0\n0,1,2.0\n", GRAPH);
    let ds = load_dataset(&f, &g).unwrap();
    assert_eq!(ds.features().shape(), &[2, 2, 1]);
    assert_eq!(ds.features().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(ds.task_names(), &["flow".to_string()]);
    assert_eq!(ds.graph().adjacency().at(&[1, 0]), 0.5);
}

#[test]
fn csv_fixture_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("t,node,a\n0,0,1\n0,0,2\n0,1,3\n", GRAPH, "duplicate"),
        ("t,node,a\n0,0,1\n0,1,2\n1,0,3\n", GRAPH, "missing row"),
        ("t,node,a\n0,0,1\n0,1,2\n", "src,dst,weight\n0,2,1.0\n", "node 2"),
        ("t,node,a\n0,0,x\n0,1,2\n", GRAPH, "invalid value"),
        ("time,node,a\n0,0,1\n", GRAPH, "header"),
        ("t,node,a\n0,0,1\n0,1,2\n", "src,dst,weight\n0,1,-1\n", "positive"),
    ];
    for (features, graph, needle) in cases {
        let (f, g) = write(dir.path(), features, graph);
        match load_dataset(&f, &g) {
            Err(e @ Error::Data(_)) => {
                assert!(e.to_string().contains(needle), "{e} lacks {needle}");
                assert_eq!(e.exit_code(), 2);
            }
            other => panic!("expected a data error for {needle}, got {other:?}"),
        }
    }
    let missing = load_dataset(&dir.path().join("nope.csv"), &dir.path().join("graph.csv")).unwrap_err();
    assert_eq!(missing.exit_code(), 1);
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&synth(0.6, 0.02, 6)).unwrap();
    let (f, g) = (dir.path().join("f.csv"), dir.path().join("g.csv"));
    save_dataset(&ds, &f, &g).unwrap();
    let back = load_dataset(&f, &g).unwrap();
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.graph().edges(), ds.graph().edges());
    assert_eq!(back.task_names(), ds.task_names());
}

#[test]
fn splits_are_chronological_and_normalization_sees_only_train() {
    let raw = generate_synthetic(&synth(0.8, 0.02, 7)).unwrap();
    let data = PreparedData::new(raw.clone(), 12, 1, [0.7, 0.1, 0.2]).unwrap();
    let s = &data.splits;
    let last_train = s.train.last().unwrap().target_time();
    assert!(s.val.iter().all(|w| w.target_time() > last_train));
    let last_val = s.val.last().unwrap().target_time();
    assert!(s.test.iter().all(|w| w.target_time() > last_val));
    assert_eq!(data.normalizer, Normalizer::fit_range(&raw, last_train + 1).unwrap());

    // Changing the future leaves the statistics alone.
    let mut future = raw.clone();
    let row = raw.n_nodes() * raw.n_tasks();
    let feats = future.features().data().to_vec();
    let mut changed = feats.clone();
    changed[(last_train + 1) * row..].iter_mut().for_each(|v| *v += 100.0);
    future = stmtl::data::StDataset::new(
        stmtl::tensor::Tensor::new(raw.features().shape().to_vec(), changed).unwrap(),
        future.graph().clone(),
        future.task_names().to_vec(),
    )
    .unwrap();
    let other = PreparedData::new(future, 12, 1, [0.7, 0.1, 0.2]).unwrap();
    assert_eq!(other.normalizer, data.normalizer);
}

#[test]
fn window_tail_round_trip() {
    let ds = generate_synthetic(&synth(0.8, 0.02, 8)).unwrap();
    let w = make_windows(&ds, 12, 3).unwrap();
    assert_eq!(w.len(), ds.len() - 12 - 3 + 1);
    let last = w.last().unwrap();
    assert_eq!(last.target_time(), ds.len() - 1);
    let x = last.x(&ds);
    for t in 0..12 {
        for n in 0..ds.n_nodes() {
            for k in 0..ds.n_tasks() {
                assert_eq!(x.at(&[t, n, k]), ds.value(last.start + t, n, k));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_windows(len in 20usize..300, a in 0.3f64..0.8, b in 0.0f64..0.2) {
        let ds = generate_synthetic(&SyntheticConfig { nodes: 2, length: len, ..Default::default() }).unwrap();
        let w = make_windows(&ds, 4, 1).unwrap();
        let s = split(&w, [a, b, 1.0 - a - b]).unwrap();
        let joined: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(joined, w);
    }

    #[test]
    fn normalization_inverts(seed in 0u64..100) {
        let ds = generate_synthetic(&SyntheticConfig { nodes: 3, length: 60, seed, ..Default::default() }).unwrap();
        let norm = Normalizer::fit_range(&ds, 40).unwrap();
        let z = norm.normalize(&ds);
        for task in 0..ds.n_tasks() {
            let back = norm.denormalize(task, &z.task_series(task));
            for (x, y) in back.iter().zip(ds.task_series(task)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
