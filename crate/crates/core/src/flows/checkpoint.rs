//! JSON weight checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::{FlowConfig, FlowError};

/// Architecture descriptor plus named weight tensors. Floats are written in
/// shortest round-trip form and parsed exactly, so save/load is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: FlowConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, FlowError> {
        serde_json::to_string(self).map_err(|e| FlowError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, FlowError> {
        serde_json::from_str(s).map_err(|e| FlowError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        std::fs::write(path, self.to_json()?).map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let s = std::fs::read_to_string(path).map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
