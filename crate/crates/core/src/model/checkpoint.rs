use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub name: String,
    pub lambda: f64,
    pub seed: u64,
    pub step: usize,
    pub task_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Self-describing JSON container: config, metadata and named parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        let params = model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| {
                let stored = StoredTensor {
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                };
                (n.clone(), stored)
            })
            .collect();
        Checkpoint {
            config: model.cfg.clone(),
            meta,
            params,
        }
    }

    pub fn into_model(self) -> Result<(Model, CheckpointMeta)> {
        let named = self
            .params
            .into_iter()
            .map(|(n, s)| Ok((n, Tensor::new(s.shape, s.data)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((Model::from_named(self.config, named)?, self.meta))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: CheckpointMeta) -> Result<()> {
    if model.params.tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("parameters"));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string(&Checkpoint::from_model(model, meta))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    ck.into_model()
}
