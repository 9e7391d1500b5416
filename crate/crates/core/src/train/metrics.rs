use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Weighted sum over tasks of the mean absolute error.
pub fn multi_task_loss(tape: &mut Tape, preds: &[Var], targets: &[Var], weights: &[f64]) -> Result<Var> {
    if preds.len() != targets.len() || preds.len() != weights.len() || preds.is_empty() {
        return Err(Error::Config(format!(
            "loss needs matching task counts, got {} predictions, {} targets, {} weights",
            preds.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut total = None;
    for ((&p, &t), &w) in preds.iter().zip(targets).zip(weights) {
        if tape.shape(p) != tape.shape(t) {
            return Err(Error::ShapeMismatch {
                primitive: "multi_task_loss",
                lhs: tape.shape(p).to_vec(),
                rhs: tape.shape(t).to_vec(),
            });
        }
        let diff = tape.sub(p, t)?;
        let abs = tape.abs(diff)?;
        let mae = tape.mean_all(abs)?;
        let term = if w == 1.0 { mae } else { tape.scale(mae, w)? };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub rmse: f64,
    pub mae: f64,
}

/// RMSE and MAE of one task over aligned prediction/target lists.
pub fn task_metrics(task: &str, preds: &[f64], targets: &[f64]) -> Result<TaskMetrics> {
    if preds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            primitive: "metrics",
            lhs: vec![preds.len()],
            rhs: vec![targets.len()],
        });
    }
    let n = preds.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
    }
    let m = TaskMetrics {
        task: task.to_string(),
        rmse: (sq / n).sqrt(),
        mae: abs / n,
    };
    check_ordering(&m)?;
    Ok(m)
}

/// rmse ≥ mae ≥ 0, allowing for the last bits of rounding when every error
/// has the same magnitude.
pub fn check_ordering(m: &TaskMetrics) -> Result<()> {
    if !(m.rmse.is_finite() && m.mae.is_finite()) {
        return Err(Error::Numerical(format!("non-finite metrics for task `{}`", m.task)));
    }
    if m.mae < 0.0 || m.rmse < m.mae * (1.0 - 1e-12) {
        return Err(Error::Numerical(format!(
            "metric ordering violated for task `{}`: rmse {} < mae {}",
            m.task, m.rmse, m.mae
        )));
    }
    Ok(())
}

/// One evaluation line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub train_loss: Option<f64>,
    pub temperature: Option<f64>,
    /// softmax(β) per (layer, task) at the time of the record.
    pub fusion: Option<Vec<Vec<f64>>>,
    pub tasks: Vec<TaskMetrics>,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn new(phase: &str, epoch: usize, split: &str, tasks: Vec<TaskMetrics>) -> Self {
        let n = tasks.len().max(1) as f64;
        MetricsRecord {
            phase: phase.to_string(),
            epoch,
            split: split.to_string(),
            train_loss: None,
            temperature: None,
            fusion: None,
            mean_rmse: tasks.iter().map(|t| t.rmse).sum::<f64>() / n,
            mean_mae: tasks.iter().map(|t| t.mae).sum::<f64>() / n,
            tasks,
            wall_time_s: 0.0,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Fixed-width table: one row per task plus the mean.
pub fn format_table(title: &str, tasks: &[TaskMetrics]) -> String {
    let mut out = format!("{title}\n{:<12} {:>10} {:>10}\n", "task", "RMSE", "MAE");
    for t in tasks {
        out.push_str(&format!("{:<12} {:>10.4} {:>10.4}\n", t.task, t.rmse, t.mae));
    }
    let n = tasks.len().max(1) as f64;
    out.push_str(&format!(
        "{:<12} {:>10.4} {:>10.4}\n",
        "mean",
        tasks.iter().map(|t| t.rmse).sum::<f64>() / n,
        tasks.iter().map(|t| t.mae).sum::<f64>() / n
    ));
    out
}
