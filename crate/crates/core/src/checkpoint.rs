//! Versioned JSON container for a model's config echo and named parameters.
//! Floats round-trip exactly.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::ops::OperationRegistry;
use crate::params::ParamStore;
use crate::rng;
use crate::search::ArchitectureSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub phase: String,
    pub config: ModelConfig,
    pub hidden_dim: usize,
    /// Present for fixed-operation models; absent for search-mode models.
    pub architecture: Option<ArchitectureSpec>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, phase: &str) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            phase: phase.to_string(),
            config: model.config().clone(),
            hidden_dim: model.hidden_dim(),
            architecture: (!model.is_searchable()).then(|| model.derive_architecture()),
            params: model.store.clone(),
        }
    }

    /// Rebuilds the model structure and loads the stored values into it.
    pub fn restore(&self, graph: Arc<Graph>) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        // Structure only; every value is overwritten below.
        let mut scratch = rng::stream(0, rng::PARAM_INIT);
        let mut model = match &self.architecture {
            Some(spec) => Model::from_architecture_with_dim(
                spec,
                &self.config,
                self.hidden_dim,
                graph,
                &mut scratch,
            )?,
            None => Model::searchable(
                &self.config,
                self.hidden_dim,
                graph,
                &OperationRegistry::standard(),
                &mut scratch,
            )?,
        };
        model.store.load_values(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Checkpoint(format!(
                "malformed checkpoint at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
