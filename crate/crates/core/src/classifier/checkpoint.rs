use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, VideoClassifier};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `checkpoint.json` and one tensor dump per parameter into `dir`.
pub fn save_checkpoint(model: &VideoClassifier, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        let file = format!("{name}.trbt");
        t.save(dir.join(&file))?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("encoding checkpoint manifest", e))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<VideoClassifier> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("checkpoint not found at {}", path.display()), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    let mut model = VideoClassifier::new(manifest.config, 0)?;
    let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((slot, entry), name) in model
        .params_mut()
        .into_iter()
        .zip(&manifest.tensors)
        .zip(&expected)
    {
        if &entry.name != name {
            return Err(Error::Format(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        let t = Tensor::load(dir.join(&entry.file))?;
        if t.shape() != slot.shape() {
            return Err(Error::Dimension {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: slot.shape().to_vec(),
            });
        }
        *slot = t;
    }
    Ok(model)
}
