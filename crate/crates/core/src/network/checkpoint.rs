//! Checkpoints: a directory holding `index.json` plus one feature-map container per tensor.
//!
//! A tensor of shape `[n]` is stored as `1×1×n`, `[a, b]` as `1×a×b` and `[a, b, c]` as `a×b×c`.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ModelParams};
use crate::error::{MafrError, Result};
use crate::feature_store::{load_feature_map, save_feature_map, FeatureMap, Modality};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub architecture: Architecture,
    pub init_seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n] => Ok((1, 1, n)),
        [a, b] => Ok((1, a, b)),
        [a, b, c] => Ok((a, b, c)),
        _ => Err(MafrError::Format(format!("unsupported tensor rank {}", shape.len()))),
    }
}

pub fn save_checkpoint(params: &ModelParams<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MafrError::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, view) in params.tensors() {
        let shape = view.shape().to_vec();
        let dims = grid_dims(&shape)?;
        let data = Array3::from_shape_vec(dims, view.iter().copied().collect())
            .map_err(|e| MafrError::Shape(e.to_string()))?;
        let file = format!("{name}.mafr");
        save_feature_map(&FeatureMap::dense(Modality::TwoD, data)?, dir.join(&file))?;
        tensors.push(TensorEntry { name, shape, file });
    }
    let index = CheckpointIndex {
        architecture: params.arch.clone(),
        init_seed: params.init_seed,
        tensors,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| MafrError::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| MafrError::io(&path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| MafrError::Format(format!("checkpoint index: {e}")))?;
    index
        .architecture
        .validate()
        .map_err(|e| MafrError::Format(format!("checkpoint architecture: {e}")))?;
    let mut params = ModelParams::<f32>::init(&index.architecture, index.init_seed)?.zeros_like();
    let expected = params.tensors().len();
    if index.tensors.len() != expected {
        return Err(MafrError::Format(format!(
            "checkpoint lists {} tensors, architecture needs {expected}",
            index.tensors.len()
        )));
    }
    for ((name, mut slot), entry) in params.tensors_mut().into_iter().zip(&index.tensors) {
        if entry.name != name || entry.shape != slot.shape() {
            return Err(MafrError::Format(format!(
                "checkpoint tensor {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let map = load_feature_map(dir.join(&entry.file))?;
        if map.data().dim() != grid_dims(&entry.shape)? {
            return Err(MafrError::Format(format!("tensor file {} has wrong dims", entry.file)));
        }
        let values = ArrayD::from_shape_vec(IxDyn(&entry.shape), map.data().iter().copied().collect())
            .map_err(|e| MafrError::Format(e.to_string()))?;
        slot.assign(&values);
    }
    Ok(params)
}
