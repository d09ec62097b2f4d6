//! On-disk run directory:
//!
//! ```text
//! config.json
//! metrics.csv        epoch,train_loss,test_accuracy,pos_00..pos_23
//! entropy.csv        epoch,layer,head,mean_entropy
//! attention/epoch_{e}_L{l}H{h}.f32
//! predictions.csv    index,predicted
//! params.bin
//! ```
//!
//! Layer and head indices in file names are 0-based; epochs are 1-based.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EpochMetrics, RunArtifact, TrainConfig};
use crate::dataset::{MATCH, NONMATCH};
use crate::grad::Matrix;
use crate::model::{save_checkpoint, AttentionRecord, CheckpointError, ModelConfig};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunConfigFile {
    n_back: usize,
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_seed: Option<u64>,
}

/// Run record without parameters, as analysis consumes it.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredRun {
    pub n_back: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub dataset_seed: Option<u64>,
    pub epoch_metrics: Vec<EpochMetrics>,
}

impl RunArtifact {
    pub fn to_stored(&self, dataset_seed: Option<u64>) -> StoredRun {
        StoredRun {
            n_back: self.n_back,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            dataset_seed,
            epoch_metrics: self.epoch_metrics.clone(),
        }
    }
}

pub fn attention_file_name(epoch: usize, layer: usize, head: usize) -> String {
    format!("epoch_{epoch}_L{layer}H{head}.f32")
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,test_accuracy");
    let positions = metrics.first().map_or(0, |m| m.per_position_accuracy.len());
    for i in 0..positions {
        let _ = write!(out, ",pos_{i:02}");
    }
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{},{},{}", m.epoch, m.train_loss, m.test_accuracy);
        for a in &m.per_position_accuracy {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

fn entropy_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,layer,head,mean_entropy\n");
    for m in metrics {
        for (rec, h) in m.mean_attention.iter().zip(&m.mean_entropy) {
            let _ = writeln!(out, "{},{},{},{}", m.epoch, rec.layer, rec.head, h);
        }
    }
    out
}

fn f32_bytes(m: &Matrix<f64>) -> Vec<u8> {
    m.data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

/// Writes every artifact of `run` into `dir` (created if missing).
pub fn write_run_dir(
    run: &RunArtifact,
    dir: &Path,
    dataset_seed: Option<u64>,
) -> Result<(), ArtifactError> {
    let attention_dir = dir.join("attention");
    fs::create_dir_all(&attention_dir).map_err(io(&attention_dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io(&path))
    };

    let config = RunConfigFile {
        n_back: run.n_back,
        model: run.model_config.clone(),
        train: run.train_config.clone(),
        dataset_seed,
    };
    let mut json = serde_json::to_string_pretty(&config).expect("config serializes");
    json.push('\n');
    write("config.json", json.as_bytes())?;
    write("metrics.csv", metrics_csv(&run.epoch_metrics).as_bytes())?;
    write("entropy.csv", entropy_csv(&run.epoch_metrics).as_bytes())?;

    for m in &run.epoch_metrics {
        for rec in &m.mean_attention {
            let path = attention_dir.join(attention_file_name(m.epoch, rec.layer, rec.head));
            fs::write(&path, f32_bytes(&rec.matrix)).map_err(io(&path))?;
        }
    }

    let mut preds = String::from("index,predicted\n");
    for (k, p) in run.predictions.iter().enumerate() {
        let labels: String = p
            .iter()
            .map(|&c| if c == 1 { MATCH } else { NONMATCH })
            .collect();
        let _ = writeln!(preds, "{k},{labels}");
    }
    write("predictions.csv", preds.as_bytes())?;
    save_checkpoint(
        &run.final_params,
        &run.model_config,
        &dir.join("params.bin"),
    )?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String, ArtifactError> {
    fs::read_to_string(path).map_err(io(path))
}

fn parse_csv(path: &Path) -> Result<Vec<Vec<f64>>, ArtifactError> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ArtifactError::Malformed {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", k + 1),
            })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a run directory written by [`write_run_dir`]; parameters are not read.
pub fn read_run_dir(dir: &Path) -> Result<StoredRun, ArtifactError> {
    let config_path = dir.join("config.json");
    let config: RunConfigFile =
        serde_json::from_str(&read_text(&config_path)?).map_err(|e| ArtifactError::Malformed {
            path: config_path.clone(),
            reason: e.to_string(),
        })?;
    let t = config.model.seq_len;
    let heads = config.model.n_layers * config.model.n_heads;

    let metrics_path = dir.join("metrics.csv");
    let entropy_path = dir.join("entropy.csv");
    let entropy_rows = parse_csv(&entropy_path)?;
    let mut epoch_metrics = Vec::new();
    for row in parse_csv(&metrics_path)? {
        if row.len() != 3 + t {
            return Err(ArtifactError::Malformed {
                path: metrics_path,
                reason: format!("expected {} columns, got {}", 3 + t, row.len()),
            });
        }
        let epoch = row[0] as usize;
        let mut mean_attention = Vec::with_capacity(heads);
        let mut mean_entropy = Vec::with_capacity(heads);
        for k in 0..heads {
            let (layer, head) = (k / config.model.n_heads, k % config.model.n_heads);
            let path = dir
                .join("attention")
                .join(attention_file_name(epoch, layer, head));
            let bytes = fs::read(&path).map_err(io(&path))?;
            if bytes.len() != t * t * 4 {
                return Err(ArtifactError::Malformed {
                    path,
                    reason: format!("expected {} bytes, got {}", t * t * 4, bytes.len()),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            mean_attention.push(AttentionRecord {
                layer,
                head,
                matrix: Matrix::new(t, t, data).expect("size checked"),
            });
            let h = entropy_rows
                .iter()
                .find(|r| {
                    r.len() == 4
                        && r[0] as usize == epoch
                        && r[1] as usize == layer
                        && r[2] as usize == head
                })
                .map(|r| r[3])
                .ok_or_else(|| ArtifactError::Malformed {
                    path: entropy_path.clone(),
                    reason: format!("no entry for epoch {epoch} L{layer}H{head}"),
                })?;
            mean_entropy.push(h);
        }
        epoch_metrics.push(EpochMetrics {
            epoch,
            train_loss: row[1],
            test_accuracy: row[2],
            per_position_accuracy: row[3..].to_vec(),
            mean_attention,
            mean_entropy,
        });
    }
    Ok(StoredRun {
        n_back: config.n_back,
        model_config: config.model,
        train_config: config.train,
        dataset_seed: config.dataset_seed,
        epoch_metrics,
    })
}
