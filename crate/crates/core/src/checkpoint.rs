//! Model persistence: the model config rides in the container metadata,
//! every named parameter tensor becomes one blob, and loading rebuilds the
//! model from the embedded config before overwriting its tensors, so a
//! checkpoint can never silently deviate from its architecture.

use std::path::Path;

use crate::config::ModelConfig;
use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::model::CascadedModel;

pub fn save_checkpoint(model: &CascadedModel, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::to_value(&model.cfg)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    let mut c = Container::new(meta);
    for (name, tensor) in model.params.iter() {
        c.push(name, Blob::from_tensor(tensor));
    }
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CascadedModel> {
    let c = Container::load(&path)?;
    let cfg: ModelConfig = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("bad config metadata: {e}")))?;
    // seed is irrelevant: every tensor is overwritten below
    let mut model = CascadedModel::new(&cfg, 0)?;
    if c.blobs.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model defines {}",
            c.blobs.len(),
            model.params.len()
        )));
    }
    for i in 0..model.params.len() {
        let name = model.params.name(i).to_string();
        let blob = c
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let t = blob.to_tensor()?;
        if t.shape != model.params.tensor(i).shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape,
                model.params.tensor(i).shape
            )));
        }
        *model.params.tensor_mut(i) = t;
    }
    Ok(model)
}

/// Load and insist the stored architecture matches `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<CascadedModel> {
    let model = load_checkpoint(path)?;
    if &model.cfg != expected {
        return Err(Error::Config(format!(
            "checkpoint architecture ({} decoder, d_model {}) does not match the requested config ({} decoder, d_model {})",
            model.cfg.decoder.kind_name(),
            model.cfg.d_model,
            expected.decoder.kind_name(),
            expected.d_model
        )));
    }
    Ok(model)
}
