use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use stmtl::checkpoint::Checkpoint;
use stmtl::data::{cross_task_correlation, generate_synthetic, save_dataset};
use stmtl::model::{ForwardMode, Model};
use stmtl::rng;
use stmtl::search::{deserialize_architecture, serialize_architecture, ArchitectureSpec};
use stmtl::train::{
    build_retrain_model, build_search_model, copy_last_baseline, format_table, predict_windows,
    run_pipeline, run_pretrain, run_retrain, run_search, MetricsRecord, Phase, PreparedData,
    TaskMetrics, Variant,
};
use stmtl::{Error, Result};

use crate::config::{DataSource, RunConfig};

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn checkpoint_file(phase: Phase) -> String {
    format!("checkpoint.{phase}.json")
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    io(dir, fs::create_dir_all(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    io(path, fs::write(path, contents))
}

/// A prior-phase artifact that must exist; a missing file is a usage error.
fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} not found; {hint}", path.display())))
    }
}

/// Appends metrics records to `metrics.jsonl`, first dropping lines of any
/// phase not listed in `keep` so reruns do not duplicate history.
struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(dir: &Path, keep: &[Phase]) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let mut kept = Vec::new();
        if path.exists() {
            let reader = BufReader::new(io(&path, File::open(&path))?);
            for line in reader.lines() {
                let line = io(&path, line)?;
                let rec: MetricsRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                if keep.iter().any(|p| p.name() == rec.phase) {
                    kept.push(line);
                }
            }
        }
        let mut out = BufWriter::new(io(&path, File::create(&path))?);
        for line in kept {
            io(&path, writeln!(out, "{line}"))?;
        }
        Ok(MetricsLog { path, out })
    }

    fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        io(&self.path, writeln!(self.out, "{}", rec.to_json_line()))?;
        io(&self.path, self.out.flush())
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub variant: String,
    pub split: String,
    pub tasks: Vec<TaskMetrics>,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    pub baseline: Vec<TaskMetrics>,
}

impl Summary {
    fn new(variant: &str, split: &str, tasks: Vec<TaskMetrics>, baseline: Vec<TaskMetrics>) -> Self {
        let n = tasks.len().max(1) as f64;
        Summary {
            variant: variant.to_string(),
            split: split.to_string(),
            mean_rmse: tasks.iter().map(|t| t.rmse).sum::<f64>() / n,
            mean_mae: tasks.iter().map(|t| t.mae).sum::<f64>() / n,
            tasks,
            baseline,
        }
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Table followed by the same numbers as JSON.
    fn print(&self, out: &mut dyn Write) -> Result<()> {
        let text = format!(
            "{}\n{}\n{}\n",
            format_table(&format!("{} / {} split", self.variant, self.split), &self.tasks),
            format_table("copy-last baseline", &self.baseline),
            self.to_json()
        );
        io(Path::new("<stdout>"), out.write_all(text.as_bytes()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(SUMMARY_FILE), &(self.to_json() + "\n"))
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    io(Path::new("<stdout>"), writeln!(out, "{text}"))
}

/// Writes the synthetic series and its graph as CSV files.
pub fn synth_data(cfg: &RunConfig, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let DataSource::Synthetic(syn) = &cfg.data else {
        return Err(Error::Config("synth-data needs a `synthetic` data section".into()));
    };
    let dir = out_dir.unwrap_or(&cfg.output_dir);
    create_dir(dir)?;
    let ds = generate_synthetic(syn)?;
    let features = dir.join("features.csv");
    let graph = dir.join("graph.csv");
    save_dataset(&ds, &features, &graph)?;
    say(
        out,
        &format!(
            "wrote {} and {}\nN={} L={} K={} rho={} correlation={:.4}",
            features.display(),
            graph.display(),
            ds.n_nodes(),
            ds.len(),
            ds.n_tasks(),
            syn.coupling,
            cross_task_correlation(&ds)
        ),
    )
}

fn print_record(out: &mut dyn Write, rec: &MetricsRecord) -> Result<()> {
    say(
        out,
        &format!(
            "{:<8} epoch {:>3}  train loss {:.5}  val mae {:.5}  val rmse {:.5}",
            rec.phase,
            rec.epoch,
            rec.train_loss.unwrap_or(f64::NAN),
            rec.mean_mae,
            rec.mean_rmse
        ),
    )
}

fn load_checkpoint(path: &Path, data: &PreparedData, cfg: &RunConfig) -> Result<Model> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Checkpoint(format!("cannot read {}", path.display())),
        other => other,
    })?;
    let (a, b) = (&ckpt.config, &cfg.model);
    if (a.n_tasks, a.history, a.horizon) != (b.n_tasks, b.history, b.horizon) {
        return Err(Error::Checkpoint(format!(
            "{} was trained for {} tasks with history {} and horizon {}, the config asks for {}, {} and {}",
            path.display(),
            a.n_tasks,
            a.history,
            a.horizon,
            b.n_tasks,
            b.history,
            b.horizon
        )));
    }
    ckpt.restore(data.normalized.graph().clone())
}

pub fn pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let data = cfg.prepare()?;
    let mut log = MetricsLog::open(dir, &[])?;
    let mut model = build_search_model(&cfg.model, data.normalized.graph().clone(), cfg.seed)?;
    let weights = cfg.training.weights(cfg.model.n_tasks);
    let mut sink = |r: &MetricsRecord| {
        log.write(r)?;
        print_record(out, r)
    };
    run_pretrain(&mut model, &data, &cfg.training.pretrain, &weights, cfg.seed, &mut sink)?;
    Checkpoint::from_model(&model, Phase::Pretrain.name()).save(&dir.join(checkpoint_file(Phase::Pretrain)))
}

pub fn search(cfg: &RunConfig, out: &mut dyn Write) -> Result<ArchitectureSpec> {
    let dir = &cfg.output_dir;
    let ckpt = dir.join(checkpoint_file(Phase::Pretrain));
    require(&ckpt, "run `pretrain` first")?;
    let data = cfg.prepare()?;
    let mut model = load_checkpoint(&ckpt, &data, cfg)?;
    let mut log = MetricsLog::open(dir, &[Phase::Pretrain])?;
    let weights = cfg.training.weights(cfg.model.n_tasks);
    let mut sink = |r: &MetricsRecord| {
        log.write(r)?;
        print_record(out, r)
    };
    let report = run_search(&mut model, &data, &cfg.training.search, &weights, false, cfg.seed, &mut sink)?;
    let spec = report.architecture.expect("search derives an architecture");
    write_file(&dir.join(ARCHITECTURE_FILE), &serialize_architecture(&spec)?)?;
    Checkpoint::from_model(&model, Phase::Search.name()).save(&dir.join(checkpoint_file(Phase::Search)))?;
    Ok(spec)
}

fn read_architecture(path: &Path) -> Result<ArchitectureSpec> {
    let text = io(path, fs::read_to_string(path))?;
    deserialize_architecture(&text)
}

fn test_summary(variant: &str, model: &Model, data: &PreparedData, seed: u64) -> Result<Summary> {
    let mut rng = rng::stream(seed, rng::GUMBEL);
    let preds = predict_windows(model, data, &data.splits.test, ForwardMode::Fixed, &mut rng)?;
    let tasks = preds.metrics(data.raw.task_names())?;
    let baseline = copy_last_baseline(data, &data.splits.test)?;
    Ok(Summary::new(variant, "test", tasks, baseline))
}

pub fn retrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<Summary> {
    let dir = &cfg.output_dir;
    let arch = dir.join(ARCHITECTURE_FILE);
    require(&arch, "run `search` first to produce it")?;
    let spec = read_architecture(&arch)?;
    let data = cfg.prepare()?;
    let mut model = build_retrain_model(&spec, &cfg.model, data.normalized.graph().clone(), cfg.seed)?;
    let mut log = MetricsLog::open(dir, &[Phase::Pretrain, Phase::Search])?;
    let weights = cfg.training.weights(cfg.model.n_tasks);
    let mut sink = |r: &MetricsRecord| {
        log.write(r)?;
        print_record(out, r)
    };
    run_retrain(&mut model, &data, &cfg.training.retrain, &weights, false, cfg.seed, &mut sink)?;
    Checkpoint::from_model(&model, Phase::Retrain.name()).save(&dir.join(checkpoint_file(Phase::Retrain)))?;
    let summary = test_summary(Variant::Full.name(), &model, &data, cfg.seed)?;
    summary.save(dir)?;
    summary.print(out)?;
    Ok(summary)
}

pub fn run_all(cfg: &RunConfig, out: &mut dyn Write) -> Result<Summary> {
    pretrain(cfg, out)?;
    search(cfg, out)?;
    retrain(cfg, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn write_predictions(path: &Path, data: &PreparedData, preds: &stmtl::train::Predictions) -> Result<()> {
    let mut w = BufWriter::new(io(path, File::create(path))?);
    io(path, writeln!(w, "t,node,task,y_true,y_pred"))?;
    let offset = data.raw.start_time();
    for (i, win) in preds.windows.iter().enumerate() {
        for node in 0..preds.n_nodes {
            for (k, task) in data.raw.task_names().iter().enumerate() {
                let idx = i * preds.n_nodes + node;
                io(
                    path,
                    writeln!(
                        w,
                        "{},{node},{task},{},{}",
                        win.target_time() + offset,
                        preds.targets[k][idx],
                        preds.preds[k][idx]
                    ),
                )?;
            }
        }
    }
    io(path, w.flush())
}

/// Metrics of a stored model on one split, optionally with per-row predictions.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    predictions: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Summary> {
    let data = cfg.prepare()?;
    let model = load_checkpoint(checkpoint, &data, cfg)?;
    let windows = match split {
        Split::Train => &data.splits.train,
        Split::Val => &data.splits.val,
        Split::Test => &data.splits.test,
    };
    let mut rng = rng::stream(cfg.seed, rng::GUMBEL);
    let preds = predict_windows(&model, &data, windows, model.eval_mode(), &mut rng)?;
    if let Some(path) = predictions {
        write_predictions(path, &data, &preds)?;
    }
    let tasks = preds.metrics(data.raw.task_names())?;
    let baseline = copy_last_baseline(&data, windows)?;
    let summary = Summary::new("checkpoint", split.name(), tasks, baseline);
    summary.print(out)?;
    Ok(summary)
}

/// Runs the whole pipeline for one variant under `output_dir/ablate/<variant>`.
pub fn ablate(cfg: &RunConfig, variant: &str, out: &mut dyn Write) -> Result<Summary> {
    let mut variant: Variant = variant.parse()?;
    if let (Variant::NoAlpha(spec), Some(path)) = (&mut variant, &cfg.ablation.architecture) {
        require(path, "set ablation.architecture to an existing architecture file")?;
        *spec = Some(read_architecture(path)?);
    }
    let dir = cfg.output_dir.join("ablate").join(variant.name());
    create_dir(&dir)?;
    let data = cfg.prepare()?;
    let mut log = MetricsLog::open(&dir, &[])?;
    let mut sink = |r: &MetricsRecord| {
        log.write(r)?;
        print_record(out, r)
    };
    let report = run_pipeline(&data, &cfg.model, &cfg.training, cfg.seed, variant, &mut sink)?;
    write_file(&dir.join(ARCHITECTURE_FILE), &serialize_architecture(&report.architecture)?)?;
    Checkpoint::from_model(&report.model, Phase::Retrain.name()).save(&dir.join(checkpoint_file(Phase::Retrain)))?;
    let summary = Summary::new(report.variant.name(), "test", report.test, report.baseline);
    summary.save(&dir)?;
    summary.print(out)?;
    Ok(summary)
}
