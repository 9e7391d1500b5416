//! Multi-task series on a graph: synthesis, CSV ingestion, windowing,
//! chronological splits and z-score normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;
use crate::tensor::Tensor;

/// Raw series shaped (L, N, K) plus the graph they live on.
#[derive(Clone, Debug)]
pub struct StDataset {
    features: Tensor,
    graph: Arc<Graph>,
    task_names: Vec<String>,
    /// Time index of row 0 in the source file.
    start_time: usize,
}

impl StDataset {
    pub fn new(features: Tensor, graph: Arc<Graph>, task_names: Vec<String>) -> Result<Self> {
        let s = features.shape();
        if s.len() != 3 {
            return Err(Error::Data(format!("features must be (L, N, K), got {s:?}")));
        }
        if s[1] != graph.n_nodes() {
            return Err(Error::Data(format!(
                "features have {} nodes but the graph has {}",
                s[1],
                graph.n_nodes()
            )));
        }
        if task_names.len() != s[2] {
            return Err(Error::Data(format!(
                "{} task names for {} task channels",
                task_names.len(),
                s[2]
            )));
        }
        Ok(StDataset {
            features,
            graph,
            task_names,
            start_time: 0,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn start_time(&self) -> usize {
        self.start_time
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn n_tasks(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn value(&self, t: usize, node: usize, task: usize) -> f64 {
        let (n, k) = (self.n_nodes(), self.n_tasks());
        self.features.data()[(t * n + node) * k + task]
    }

    /// Series of one task flattened over (time, node).
    pub fn task_series(&self, task: usize) -> Vec<f64> {
        let k = self.n_tasks();
        self.features.data().iter().skip(task).step_by(k).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphModel {
    /// Bidirectional ring with unit weights.
    Ring,
    /// Nodes uniform in the unit square, linked both ways when closer than
    /// `radius`, weighted exp(−(dist/radius)²).
    RandomGeometric { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub nodes: usize,
    pub length: usize,
    pub tasks: usize,
    /// Weight ρ of the latent signal shared by all tasks.
    pub coupling: f64,
    pub period: usize,
    /// Std of the white observation noise.
    pub noise: f64,
    /// AR(1) coefficient and innovation std of the latent and task components.
    pub ar_coef: f64,
    pub ar_scale: f64,
    pub graph: GraphModel,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            nodes: 20,
            length: 2000,
            tasks: 2,
            coupling: 0.8,
            period: 48,
            noise: 0.02,
            ar_coef: 0.8,
            ar_scale: 0.02,
            graph: GraphModel::RandomGeometric { radius: 0.35 },
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!(
                "coupling must lie in [0, 1], got {}",
                self.coupling
            )));
        }
        if self.nodes == 0 || self.length == 0 || self.period == 0 || self.tasks == 0 {
            return Err(Error::Config(
                "synthetic nodes, length, period and tasks must be positive".into(),
            ));
        }
        if self.noise < 0.0 || self.ar_scale < 0.0 || self.ar_coef.abs() >= 1.0 {
            return Err(Error::Config(
                "noise scales must be non-negative and |ar_coef| < 1".into(),
            ));
        }
        if let GraphModel::RandomGeometric { radius } = self.graph {
            if radius <= 0.0 {
                return Err(Error::Config("graph radius must be positive".into()));
            }
        }
        Ok(())
    }
}

fn synth_graph(cfg: &SyntheticConfig, rng: &mut rng::Rng) -> Result<Graph> {
    let n = cfg.nodes;
    let mut edges = Vec::new();
    match cfg.graph {
        GraphModel::Ring => {
            if n > 1 {
                for i in 0..n {
                    let j = (i + 1) % n;
                    if i != j {
                        edges.push((i, j, 1.0));
                        edges.push((j, i, 1.0));
                    }
                }
            }
            // With two nodes both directions are already present after i = 0.
            if n == 2 {
                edges.truncate(2);
            }
        }
        GraphModel::RandomGeometric { radius } => {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let dist = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    if dist < radius {
                        edges.push((i, j, (-(dist / radius).powi(2)).exp()));
                    }
                }
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Latent seasonal signal diffused one step over the graph plus AR noise,
/// mixed with an independent component per task:
/// task_k = ρ·latent + (1−ρ)·own_k + white noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<StDataset> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, rng::SYNTH);
    let graph = synth_graph(cfg, &mut rng)?;
    let (n, len, k) = (cfg.nodes, cfg.length, cfg.tasks);
    let draw_phases = |rng: &mut rng::Rng| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
    };
    let latent_phase = draw_phases(&mut rng);
    let task_phase: Vec<Vec<f64>> = (0..k).map(|_| draw_phases(&mut rng)).collect();

    let pf = graph.fwd_transition().data().to_vec();
    let period = cfg.period as f64;
    let mut latent = vec![0.0; len * n];
    let mut ar = vec![0.0; n];
    for t in 0..len {
        let base: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * t as f64 / period + latent_phase[i]).sin())
            .collect();
        for i in 0..n {
            let diffused: f64 = (0..n).map(|j| pf[i * n + j] * base[j]).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            ar[i] = cfg.ar_coef * ar[i] + cfg.ar_scale * eps;
            latent[t * n + i] = 0.5 * base[i] + 0.5 * diffused + ar[i];
        }
    }

    let mut features = Tensor::zeros(&[len, n, k]);
    for task in 0..k {
        // Task components cycle at periods incommensurate with the latent one.
        let own_period = period * (1.5 + 0.5 * task as f64);
        let mut own_ar = vec![0.0; n];
        for t in 0..len {
            for i in 0..n {
                let eps: f64 = StandardNormal.sample(&mut rng);
                own_ar[i] = cfg.ar_coef * own_ar[i] + cfg.ar_scale * eps;
                let own = (2.0 * PI * t as f64 / own_period + task_phase[task][i]).sin() + own_ar[i];
                let white: f64 = StandardNormal.sample(&mut rng);
                let v = cfg.coupling * latent[t * n + i]
                    + (1.0 - cfg.coupling) * own
                    + cfg.noise * white;
                features.data_mut()[(t * n + i) * k + task] = v;
            }
        }
    }
    let names = (0..k).map(|i| format!("task_{i}")).collect();
    StDataset::new(features, Arc::new(graph), names)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Mean Pearson correlation over all task pairs (1.0 for a single task).
pub fn cross_task_correlation(ds: &StDataset) -> f64 {
    let k = ds.n_tasks();
    if k < 2 {
        return 1.0;
    }
    let series: Vec<Vec<f64>> = (0..k).map(|i| ds.task_series(i)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..k {
        for j in i + 1..k {
            total += pearson(&series[i], &series[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Data(format!("{}: {e}", path.display())),
    }
}

/// Reads the features CSV (`t,node,<task columns…>`) and edge-list CSV
/// (`src,dst,weight`). Rows may appear in any order.
pub fn load_dataset(features_path: &Path, graph_path: &Path) -> Result<StDataset> {
    let mut reader = csv::Reader::from_path(features_path).map_err(|e| csv_err(features_path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(features_path, e))?.clone();
    if headers.len() < 3 || &headers[0] != "t" || &headers[1] != "node" {
        return Err(Error::Data(format!(
            "{}: header must be `t,node,task_0,...`",
            features_path.display()
        )));
    }
    let task_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let k = task_names.len();
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(features_path, e))?;
        let line = row + 2;
        let parse_idx = |i: usize, what: &str| -> Result<usize> {
            record[i].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{line}: `{what}` must be a non-negative integer, got `{}`",
                    features_path.display(),
                    &record[i]
                ))
            })
        };
        if record.len() != k + 2 {
            return Err(Error::Data(format!(
                "{}:{line}: expected {} fields, found {}",
                features_path.display(),
                k + 2,
                record.len()
            )));
        }
        let t = parse_idx(0, "t")?;
        let node = parse_idx(1, "node")?;
        let values = (2..k + 2)
            .map(|i| {
                record[i].trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!(
                        "{}:{line}: invalid value `{}`",
                        features_path.display(),
                        &record[i]
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if cells.insert((t, node), values).is_some() {
            return Err(Error::Data(format!(
                "{}:{line}: duplicate row for t={t}, node={node}",
                features_path.display()
            )));
        }
    }
    if cells.is_empty() {
        return Err(Error::Data(format!("{}: no rows", features_path.display())));
    }
    let times: BTreeSet<usize> = cells.keys().map(|&(t, _)| t).collect();
    let nodes: BTreeSet<usize> = cells.keys().map(|&(_, n)| n).collect();
    let t0 = *times.first().expect("non-empty");
    let t1 = *times.last().expect("non-empty");
    let n = *nodes.last().expect("non-empty") + 1;
    let len = t1 - t0 + 1;
    let mut features = Tensor::zeros(&[len, n, k]);
    for t in t0..=t1 {
        for node in 0..n {
            let values = cells.get(&(t, node)).ok_or_else(|| {
                Error::Data(format!(
                    "{}: missing row for t={t}, node={node}",
                    features_path.display()
                ))
            })?;
            let off = ((t - t0) * n + node) * k;
            features.data_mut()[off..off + k].copy_from_slice(values);
        }
    }

    let graph = load_graph(graph_path, n)?;
    let mut ds = StDataset::new(features, Arc::new(graph), task_names)?;
    ds.start_time = t0;
    Ok(ds)
}

pub fn load_graph(path: &Path, n_nodes: usize) -> Result<Graph> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(Error::Data(format!(
            "{}: header must be `src,dst,weight`",
            path.display()
        )));
    }
    let mut edges = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = row + 2;
        let bad = || Error::Data(format!("{}:{line}: malformed edge row", path.display()));
        if record.len() != 3 {
            return Err(bad());
        }
        let src: usize = record[0].trim().parse().map_err(|_| bad())?;
        let dst: usize = record[1].trim().parse().map_err(|_| bad())?;
        let w: f64 = record[2].trim().parse().map_err(|_| bad())?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Data(format!(
                "{}:{line}: edge weight must be positive, got {w}",
                path.display()
            )));
        }
        for node in [src, dst] {
            if node >= n_nodes {
                return Err(Error::Data(format!(
                    "{}:{line}: node {node} does not appear in the features file (nodes 0..{n_nodes})",
                    path.display()
                )));
            }
        }
        edges.push((src, dst, w));
    }
    Graph::from_edges(n_nodes, &edges)
}

/// Writes both files in the ingestion format.
pub fn save_dataset(ds: &StDataset, features_path: &Path, graph_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(features_path).map_err(|e| csv_err(features_path, e))?;
    let mut header = vec!["t".to_string(), "node".to_string()];
    header.extend(ds.task_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(features_path, e))?;
    for t in 0..ds.len() {
        for node in 0..ds.n_nodes() {
            let mut rec = vec![(t + ds.start_time).to_string(), node.to_string()];
            rec.extend((0..ds.n_tasks()).map(|k| ds.value(t, node, k).to_string()));
            w.write_record(&rec).map_err(|e| csv_err(features_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(features_path, e))?;

    let mut w = csv::Writer::from_path(graph_path).map_err(|e| csv_err(graph_path, e))?;
    w.write_record(["src", "dst", "weight"]).map_err(|e| csv_err(graph_path, e))?;
    for (s, d, wt) in ds.graph.edges() {
        w.write_record([s.to_string(), d.to_string(), wt.to_string()])
            .map_err(|e| csv_err(graph_path, e))?;
    }
    w.flush().map_err(|e| Error::io(graph_path, e))?;
    Ok(())
}

/// One training sample: inputs at times start..start+history, target at
/// start + history + horizon − 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub history: usize,
    pub horizon: usize,
}

impl Window {
    pub fn target_time(&self) -> usize {
        self.start + self.history + self.horizon - 1
    }

    /// (T, N, K) input block.
    pub fn x(&self, ds: &StDataset) -> Tensor {
        let row = ds.n_nodes() * ds.n_tasks();
        let data = ds.features.data()[self.start * row..(self.start + self.history) * row].to_vec();
        Tensor::new(vec![self.history, ds.n_nodes(), ds.n_tasks()], data).expect("window shape")
    }

    /// (N, K) target.
    pub fn y(&self, ds: &StDataset) -> Tensor {
        let row = ds.n_nodes() * ds.n_tasks();
        let t = self.target_time();
        let data = ds.features.data()[t * row..(t + 1) * row].to_vec();
        Tensor::new(vec![ds.n_nodes(), ds.n_tasks()], data).expect("window shape")
    }
}

/// Stride-1 sliding windows; count = L − history − horizon + 1.
pub fn make_windows(ds: &StDataset, history: usize, horizon: usize) -> Result<Vec<Window>> {
    if history == 0 || horizon == 0 {
        return Err(Error::Config("history and horizon must be positive".into()));
    }
    if ds.len() < history + horizon {
        return Err(Error::Data(format!(
            "series of length {} is shorter than history {history} + horizon {horizon}",
            ds.len()
        )));
    }
    Ok((0..=ds.len() - history - horizon)
        .map(|start| Window {
            start,
            history,
            horizon,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

/// Chronological split of the window list by `ratios` (train, val, test).
pub fn split(windows: &[Window], ratios: [f64; 3]) -> Result<Splits> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = windows.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    Ok(Splits {
        train: windows[..n_train].to_vec(),
        val: windows[n_train..n_train + n_val].to_vec(),
        test: windows[n_train + n_val..].to_vec(),
    })
}

/// Per-task z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics over every node and every time step touched by the
    /// training windows (inputs and targets), per task.
    pub fn fit(ds: &StDataset, train: &[Window]) -> Result<Self> {
        let last = train
            .iter()
            .map(Window::target_time)
            .max()
            .ok_or_else(|| Error::Data("training split is empty".into()))?;
        Self::fit_range(ds, last + 1)
    }

    /// Statistics over time steps 0..end.
    pub fn fit_range(ds: &StDataset, end: usize) -> Result<Self> {
        let (n, k) = (ds.n_nodes(), ds.n_tasks());
        let count = (end * n) as f64;
        let mut mean = vec![0.0; k];
        let mut std = vec![0.0; k];
        for task in 0..k {
            let vals = || (0..end).flat_map(move |t| (0..n).map(move |i| ds.value(t, i, task)));
            let m = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - m).powi(2)).sum::<f64>() / count;
            if !(var > 0.0) {
                return Err(Error::Data(format!(
                    "task `{}` is constant over the training range",
                    ds.task_names[task]
                )));
            }
            mean[task] = m;
            std[task] = var.sqrt();
        }
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, ds: &StDataset) -> StDataset {
        let k = ds.n_tasks();
        let mut out = ds.clone();
        for (i, v) in out.features.data_mut().iter_mut().enumerate() {
            let task = i % k;
            *v = (*v - self.mean[task]) / self.std[task];
        }
        out
    }

    pub fn denormalize(&self, task: usize, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| v * self.std[task] + self.mean[task])
            .collect()
    }
}

/// Stacks windows into a model input (B, T, N, K) and per-task targets (B, N).
pub fn make_batch(ds: &StDataset, windows: &[Window]) -> (Tensor, Vec<Tensor>) {
    let (n, k) = (ds.n_nodes(), ds.n_tasks());
    let b = windows.len();
    let history = windows.first().map_or(0, |w| w.history);
    let mut x = Vec::with_capacity(b * history * n * k);
    let mut targets = vec![Vec::with_capacity(b * n); k];
    for w in windows {
        x.extend_from_slice(w.x(ds).data());
        let y = w.y(ds);
        for node in 0..n {
            for (task, tgt) in targets.iter_mut().enumerate() {
                tgt.push(y.data()[node * k + task]);
            }
        }
    }
    let x = Tensor::new(vec![b, history, n, k], x).expect("batch shape");
    let targets = targets
        .into_iter()
        .map(|t| Tensor::new(vec![b, n], t).expect("target shape"))
        .collect();
    (x, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(len: usize) -> StDataset {
        let data: Vec<f64> = (0..len * 2).map(|i| i as f64).collect();
        let f = Tensor::new(vec![len, 2, 1], data).unwrap();
        let g = Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        StDataset::new(f, Arc::new(g), vec!["a".into()]).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&tiny(13), 12, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&tiny(20), 12, 1).unwrap().len(), 8);
        assert!(make_windows(&tiny(12), 12, 1).is_err());
    }

    #[test]
    fn window_target_indexing() {
        let ds = tiny(20);
        for (i, w) in make_windows(&ds, 12, 1).unwrap().iter().enumerate() {
            let y = w.y(&ds);
            assert_eq!(y.data(), &[ds.value(i + 12, 0, 0), ds.value(i + 12, 1, 0)]);
        }
    }

    #[test]
    fn split_sizes() {
        let w = make_windows(&tiny(111), 10, 1).unwrap();
        assert_eq!(w.len(), 101);
        let s = split(&w[..100], [0.7, 0.1, 0.2]).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let s = split(&w[..10], [0.7, 0.1, 0.2]).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split(&w[..10], [0.7, 0.1, 0.2]).unwrap());
        assert!(split(&w, [0.7, 0.1, 0.1]).is_err());
    }

    #[test]
    fn normalize_hand_series() {
        // one node, one task, series [0, 2]: mean 1, std 1
        let f = Tensor::new(vec![2, 1, 1], vec![0.0, 2.0]).unwrap();
        let g = Graph::from_edges(1, &[]).unwrap();
        let ds = StDataset::new(f, Arc::new(g), vec!["a".into()]).unwrap();
        let norm = Normalizer::fit_range(&ds, 2).unwrap();
        assert_eq!((norm.mean[0], norm.std[0]), (1.0, 1.0));
        assert_eq!(norm.normalize(&ds).features().data(), &[-1.0, 1.0]);
        assert_eq!(norm.denormalize(0, &[-1.0, 1.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn constant_series_rejected() {
        let f = Tensor::full(&[4, 1, 1], 3.0);
        let g = Graph::from_edges(1, &[]).unwrap();
        let ds = StDataset::new(f, Arc::new(g), vec!["a".into()]).unwrap();
        assert!(Normalizer::fit_range(&ds, 4).is_err());
    }

    #[test]
    fn invalid_coupling_rejected() {
        let cfg = SyntheticConfig {
            coupling: 2.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
