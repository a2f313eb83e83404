use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, ReasonModel};
use crate::autodiff::Tensor;
use crate::program::vocab_fingerprint;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found}, this build reads version {expected}")]
    Version { found: u64, expected: u32 },
    #[error("vocabulary fingerprint {found} does not match {expected}")]
    Fingerprint { found: String, expected: String },
    #[error("tensor {tensor:?}: shape {found:?}, config implies {expected:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0:?} missing from checkpoint")]
    Missing(String),
    #[error("tensor {0:?} is not part of the configured model")]
    Unexpected(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    vocab_fingerprint: String,
    tensors: BTreeMap<String, Tensor>,
}

impl ReasonModel {
    /// Compact JSON with shortest round-trip float formatting.
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab_fingerprint: vocab_fingerprint().to_string(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| {
                    (
                        n.to_string(),
                        Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("valid"),
                    )
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, CheckpointError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Format("missing integer \"version\"".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let found = raw
            .get("vocab_fingerprint")
            .and_then(serde_json::Value::as_str)
            .unwrap_or_default();
        if found != vocab_fingerprint() {
            return Err(CheckpointError::Fingerprint {
                found: found.into(),
                expected: vocab_fingerprint().into(),
            });
        }
        let file: CheckpointFile =
            serde_json::from_value(raw).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut model = ReasonModel::new(file.config)?;
        let mut tensors = file.tensors;
        for (name, slot) in model.params.iter_mut() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
            if t.shape() != slot.shape() || t.values().len() != slot.len() {
                return Err(CheckpointError::Shape {
                    tensor: name.to_string(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            slot.values_mut().copy_from_slice(t.values());
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(CheckpointError::Unexpected(name));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_json()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_json(&text)
    }
}
