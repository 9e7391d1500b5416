use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stmtl::data::{generate_synthetic, load_dataset, StDataset, SyntheticConfig};
use stmtl::model::ModelConfig;
use stmtl::train::{PreparedData, TrainingConfig};
use stmtl::{Error, Result};

/// Where the series comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files { features: PathBuf, graph: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Architecture file that fixes the operations for `no_alpha`; GCN
    /// layers under an RNN top layer when absent.
    pub architecture: Option<PathBuf>,
}

/// Everything one run needs. Relative paths resolve against the directory
/// of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    /// Train, validation and test fractions of the chronological windows.
    pub split: [f64; 3],
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSource::Synthetic(SyntheticConfig::default()),
            split: [0.7, 0.1, 0.2],
            model: ModelConfig {
                hidden_dim: 16,
                ..Default::default()
            },
            training: TrainingConfig::desk(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            let cfg = RunConfig::default();
            cfg.validate()?;
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let DataSource::Files { features, graph } = &mut self.data {
            join(features);
            join(graph);
        }
        if let Some(a) = &mut self.ablation.architecture {
            join(a);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
            if s.tasks != self.model.n_tasks {
                return Err(Error::Config(format!(
                    "data.synthetic.tasks is {} but model.n_tasks is {}",
                    s.tasks, self.model.n_tasks
                )));
            }
        }
        if self.split.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("split ratios must be non-negative, got {:?}", self.split)));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {:?}", self.split)));
        }
        self.model.validate()?;
        self.training.validate(self.model.n_tasks)
    }

    pub fn load_dataset(&self) -> Result<StDataset> {
        let ds = match &self.data {
            DataSource::Synthetic(s) => generate_synthetic(s)?,
            DataSource::Files { features, graph } => load_dataset(features, graph)?,
        };
        if ds.n_tasks() != self.model.n_tasks {
            return Err(Error::Config(format!(
                "dataset has {} tasks but model.n_tasks is {}",
                ds.n_tasks(),
                self.model.n_tasks
            )));
        }
        Ok(ds)
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        PreparedData::new(self.load_dataset()?, self.model.history, self.model.horizon, self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse(r#"{"sed": 3}"#).is_err());
        assert!(parse(r#"{"model": {"hidden": 3}}"#).is_err());
    }

    #[test]
    fn bad_coupling_rejected() {
        let err = parse(r#"{"data": {"synthetic": {"coupling": 2.0}}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn split_must_sum_to_one() {
        assert!(parse(r#"{"split": [0.5, 0.1, 0.1]}"#).is_err());
    }

    #[test]
    fn file_source_round_trips() {
        let cfg = parse(r#"{"data": {"files": {"features": "f.csv", "graph": "g.csv"}}}"#).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }
}
