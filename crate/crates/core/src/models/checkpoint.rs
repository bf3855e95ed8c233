//! JSON checkpoint: model config, input width and every named parameter
//! (including batch-norm running statistics). Floats are written in
//! shortest round-trip form, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::numerics::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "simgnn-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub in_features: usize,
    pub params: ParamStore,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let err = |msg: String| ModelError::Checkpoint { path: path.display().to_string(), msg };
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        in_features: model.in_features,
        params: model.params.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| err(e.to_string()))?;
    fs::write(path, text).map_err(|e| err(e.to_string()))
}

/// Rebuild the layout from the stored config and copy values in, checking
/// that names and shapes line up.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    let path = path.as_ref();
    let err = |msg: String| ModelError::Checkpoint { path: path.display().to_string(), msg };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(err(format!("unsupported format '{}'", ck.format)));
    }
    let mut model = Model::new(ck.config, ck.in_features, 0)?;
    if model.params.len() != ck.params.len() {
        return Err(err(format!("expected {} parameters, found {}", model.params.len(), ck.params.len())));
    }
    for ((_, want), (_, got)) in model.params.iter().zip(ck.params.iter()) {
        if want.name != got.name || want.value.shape() != got.value.shape() || want.trainable != got.trainable {
            return Err(err(format!("parameter '{}' {:?} does not match '{}' {:?}", got.name, got.value.shape(), want.name, want.value.shape())));
        }
        if !got.value.all_finite() {
            return Err(err(format!("parameter '{}' has non-finite values", got.name)));
        }
    }
    model.params = ck.params;
    Ok(model)
}
