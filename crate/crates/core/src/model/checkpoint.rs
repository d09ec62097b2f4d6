//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header (config, tensor names, shapes, byte offsets), then every tensor as
//! row-major little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelParams};
use crate::grad::Matrix;

const FORMAT: &str = "nback-params-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in params.named() {
        tensors.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len() * 4;
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.to_string(),
        config: config.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header.len() + offset);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, m) in params.named() {
        for x in m.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>), CheckpointError> {
    let malformed = |reason: String| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(malformed("file shorter than the length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| malformed(format!("header length {header_len} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| malformed(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(malformed(format!("unknown format {:?}", header.format)));
    }
    header
        .config
        .validate()
        .map_err(|e| malformed(e.to_string()))?;
    let data = &bytes[data_start..];

    let mut params = ModelParams::<f32>::zeros(&header.config);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(malformed(format!(
            "expected {} tensors, header lists {}",
            names.len(),
            header.tensors.len()
        )));
    }
    for ((slot, name), entry) in params
        .tensors_mut()
        .into_iter()
        .zip(&names)
        .zip(&header.tensors)
    {
        if &entry.name != name || (entry.rows, entry.cols) != slot.shape() {
            return Err(malformed(format!(
                "tensor {:?} {}x{} does not match expected {:?} {}x{}",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                slot.rows(),
                slot.cols()
            )));
        }
        let end = entry.offset + slot.len() * 4;
        let raw = data
            .get(entry.offset..end)
            .ok_or_else(|| malformed(format!("tensor {name} runs past end of file")))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *slot =
            Matrix::new(entry.rows, entry.cols, values).map_err(|e| malformed(e.to_string()))?;
    }
    Ok((header.config, params))
}
