//! Named tensor sets stored as FVEM files plus a JSON index, and the config
//! hash stamped on every output artifact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_embeddings, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::kernel::Matrix;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

/// The JSON index of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointIndex<C> {
    pub kind: String,
    pub config: C,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// First 16 hex digits of the SHA-256 of the value's JSON serialization.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

pub fn write_tensor_set<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    tensors: &[(String, &Matrix<f32>)],
) -> Result<CheckpointIndex<C>>
where
    C: Clone,
{
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let file = format!("{name}.fvem");
        let em = EmbeddingMatrix::new(m.rows(), m.cols(), m.data().to_vec())?;
        write_embeddings(dir.join(&file), &em)?;
        entries.push(TensorEntry {
            name: name.clone(),
            file,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let index = CheckpointIndex {
        kind: kind.to_string(),
        config: config.clone(),
        config_hash: config_hash(config),
        tensors: entries,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_tensor_set<C: DeserializeOwned>(
    dir: &Path,
    kind: &str,
) -> Result<(CheckpointIndex<C>, HashMap<String, Matrix<f32>>)> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex<C> = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.clone(),
        source,
    })?;
    if index.kind != kind {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} holds {:?}, expected {kind:?}",
            dir.display(),
            index.kind
        )));
    }
    let mut tensors = HashMap::new();
    for e in &index.tensors {
        let m = read_embeddings(dir.join(&e.file))?;
        if (m.rows(), m.cols()) != (e.rows, e.cols) {
            return Err(Error::Shape(format!(
                "tensor {} is {}x{}, index says {}x{}",
                e.name,
                m.rows(),
                m.cols(),
                e.rows,
                e.cols
            )));
        }
        tensors.insert(
            e.name.clone(),
            Matrix::from_vec(m.rows(), m.cols(), m.data().to_vec())?,
        );
    }
    Ok((index, tensors))
}

/// Copies tensors from `loaded` into `slots`, requiring an exact name and shape match.
pub fn fill_named(
    slots: Vec<(String, &mut Matrix<f32>)>,
    mut loaded: HashMap<String, Matrix<f32>>,
) -> Result<()> {
    for (name, slot) in slots {
        let m = loaded
            .remove(&name)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks tensor {name}")))?;
        if m.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "tensor {name}: checkpoint {:?}, model {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::InvalidConfig(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(())
}
