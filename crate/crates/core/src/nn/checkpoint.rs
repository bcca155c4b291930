use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON checkpoint of named parameter tensors plus the model config
/// needed to rebuild the architecture. Floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_type: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model_type: impl Into<String>, config: serde_json::Value, tensors: Vec<NamedTensor>) -> Self {
        Self { version: CHECKPOINT_VERSION, model_type: model_type.into(), config, tensors }
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let ck: Self = serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        for t in &ck.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(NnError::DataLength { shape: t.shape.clone(), len: t.data.len() });
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_json()?).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let s = fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
