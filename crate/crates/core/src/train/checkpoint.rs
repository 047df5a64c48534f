//! Checkpoint directories: `manifest.json`, `weights.bin` and `model.json`.
//!
//! `weights.bin` holds every tensor of the parameter store (running
//! statistics included) as little-endian `f32`, concatenated in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Label set and input size stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub image_size: Option<usize>,
}

/// Contents of `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub spec: BackboneSpec,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = model.store().entries();
    let manifest: Vec<TensorInfo> = entries
        .iter()
        .map(|e| TensorInfo {
            name: e.name.clone(),
            shape: e.tensor.shape().dims().to_vec(),
            dtype: "f32".into(),
        })
        .collect();
    let mut bytes = Vec::with_capacity(4 * entries.iter().map(|e| e.tensor.len()).sum::<usize>());
    for e in entries {
        for &v in e.tensor.data() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let info = ModelInfo {
        spec: model.spec().clone(),
        meta: meta.clone(),
    };
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write(&dir.join(WEIGHTS_FILE), &bytes)?;
    write(&dir.join(MODEL_FILE), serde_json::to_string_pretty(&info)?.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_model_info(dir: &Path) -> Result<ModelInfo> {
    let path = dir.join(MODEL_FILE);
    serde_json::from_slice(&read(&path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Rebuild the model described in `model.json` and fill it from the weights.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let info = read_model_info(dir)?;
    let mut model = Model::build(&info.spec, 0)?;
    load_weights(&mut model, dir)?;
    Ok((model, info.meta))
}

/// Overwrite every tensor of `model` from a checkpoint with the same layout.
pub fn load_weights<T: Scalar>(model: &mut Model<T>, dir: &Path) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Vec<TensorInfo> = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", manifest_path.display())))?;
    let store = model.store();
    for (i, info) in manifest.iter().enumerate() {
        if info.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}`: unsupported dtype {:?}", info.name, info.dtype)));
        }
        let Some(entry) = store.entries().get(i) else {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has no counterpart; model holds {} tensors",
                info.name,
                store.len()
            )));
        };
        let dims = entry.tensor.shape().dims();
        if entry.name != info.name || info.shape != dims {
            return Err(Error::Checkpoint(format!(
                "first mismatched tensor: checkpoint `{}` {:?} vs model `{}` {}",
                info.name,
                info.shape,
                entry.name,
                Shape(dims)
            )));
        }
    }
    if manifest.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "first mismatched tensor: model `{}` missing from checkpoint",
            store.entries()[manifest.len()].name
        )));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = read(&weights_path)?;
    let expected: usize = manifest.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, manifest needs {expected}",
            weights_path.display(),
            bytes.len()
        )));
    }
    let mut words = bytes
        .chunks_exact(4)
        .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64));
    let store = model.store_mut();
    for info in &manifest {
        let id = store.find(&info.name).expect("checked above");
        for v in store.tensor_mut(id).data_mut() {
            *v = words.next().expect("length checked above");
        }
    }
    Ok(())
}
