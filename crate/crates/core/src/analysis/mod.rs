//! Attention diagnostics computed from trained runs: total entropy of an
//! attention matrix, mass on the N-back diagonal, accuracy/attention
//! pairings, entropy-by-N summaries and a logarithmic accuracy fit.

mod heatmap;

pub use heatmap::{heatmap_svg, render_heatmap};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::grad::Matrix;
use crate::training::StoredRun;

/// Tolerance on row sums of an attention matrix.
pub const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid attention matrix: {0}")]
    InvalidAttention(String),
    #[error("n_back {n_back} out of range for a {size}x{size} matrix")]
    NBackRange { n_back: usize, size: usize },
    #[error("run {seed} for n_back {n_back} is missing epoch {epoch}")]
    MissingEpoch {
        seed: u64,
        n_back: usize,
        epoch: usize,
    },
    #[error("layer {layer} head {head} not present in run {seed}")]
    MissingHead {
        seed: u64,
        layer: usize,
        head: usize,
    },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("no runs to summarize")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check_attention(a: &Matrix<f64>) -> Result<(), AnalysisError> {
    let (t, c) = a.shape();
    if t != c {
        return Err(AnalysisError::InvalidAttention(format!(
            "{t}x{c} is not square"
        )));
    }
    for i in 0..t {
        let row = a.row(i);
        if let Some(j) = row.iter().position(|&x| x.is_nan() || x < 0.0) {
            return Err(AnalysisError::InvalidAttention(format!(
                "entry ({i},{j}) = {} is negative or NaN",
                row[j]
            )));
        }
        if let Some(j) = row[i + 1..].iter().position(|&x| x != 0.0) {
            return Err(AnalysisError::InvalidAttention(format!(
                "entry ({i},{}) above the diagonal is nonzero",
                i + 1 + j
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(AnalysisError::InvalidAttention(format!(
                "row {i} sums to {s}"
            )));
        }
    }
    Ok(())
}

/// Sum over rows of the Shannon entropy (nats) of each causal attention row,
/// with `0·ln 0 = 0`.
pub fn total_entropy(a: &Matrix<f64>) -> Result<f64, AnalysisError> {
    check_attention(a)?;
    let mut h = 0.0;
    for i in 0..a.rows() {
        for &p in &a.row(i)[..=i] {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
    }
    Ok(h)
}

/// `A[i][i-N]` for `i = N..T`.
pub fn nback_diagonal(a: &Matrix<f64>, n_back: usize) -> Result<Vec<f64>, AnalysisError> {
    check_attention(a)?;
    let t = a.rows();
    if n_back == 0 || n_back >= t {
        return Err(AnalysisError::NBackRange { n_back, size: t });
    }
    Ok((n_back..t).map(|i| a.get(i, i - n_back)).collect())
}

/// Mean of the N-back diagonal.
pub fn diagonal_mass(a: &Matrix<f64>, n_back: usize) -> Result<f64, AnalysisError> {
    let d = nback_diagonal(a, n_back)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean N-back diagonal of one run at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalProfile {
    pub n_back: usize,
    pub epoch: usize,
    /// `values[k]` belongs to query position `n_back + k`.
    pub values: Vec<f64>,
}

pub fn diagonal_profiles(
    run: &StoredRun,
    layer: usize,
    head: usize,
) -> Result<Vec<DiagonalProfile>, AnalysisError> {
    run.epoch_metrics
        .iter()
        .map(|m| {
            let a = attention_of(run, m, layer, head)?;
            Ok(DiagonalProfile {
                n_back: run.n_back,
                epoch: m.epoch,
                values: nback_diagonal(a, run.n_back)?,
            })
        })
        .collect()
}

fn attention_of<'a>(
    run: &StoredRun,
    metrics: &'a crate::training::EpochMetrics,
    layer: usize,
    head: usize,
) -> Result<&'a Matrix<f64>, AnalysisError> {
    metrics
        .mean_attention
        .iter()
        .find(|r| r.layer == layer && r.head == head)
        .map(|r| &r.matrix)
        .ok_or(AnalysisError::MissingHead {
            seed: run.train_config.seed,
            layer,
            head,
        })
}

fn check_epochs(run: &StoredRun) -> Result<(), AnalysisError> {
    for epoch in 1..=run.train_config.epochs {
        if run.epoch_metrics.get(epoch - 1).map(|m| m.epoch) != Some(epoch) {
            return Err(AnalysisError::MissingEpoch {
                seed: run.train_config.seed,
                n_back: run.n_back,
                epoch,
            });
        }
    }
    Ok(())
}

/// One point of the accuracy-versus-attention scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyAttentionPoint {
    pub seed: u64,
    pub epoch: usize,
    pub position: usize,
    /// `A[i][i-N]` of the test-mean attention.
    pub attention: f64,
    /// Test accuracy at position `i`.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AccuracyAttentionPairs {
    pub points: Vec<AccuracyAttentionPoint>,
}

impl AccuracyAttentionPairs {
    /// Points grouped by query position.
    pub fn by_position(&self) -> BTreeMap<usize, Vec<&AccuracyAttentionPoint>> {
        let mut out: BTreeMap<usize, Vec<_>> = BTreeMap::new();
        for p in &self.points {
            out.entry(p.position).or_default().push(p);
        }
        out
    }

    pub fn attention(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.attention).collect()
    }

    pub fn accuracy(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.accuracy).collect()
    }
}

/// One point per (run, epoch, position `i ≥ N`) for the given head.
pub fn accuracy_attention_pairs(
    runs: &[StoredRun],
    layer: usize,
    head: usize,
) -> Result<AccuracyAttentionPairs, AnalysisError> {
    let mut points = Vec::new();
    for run in runs {
        check_epochs(run)?;
        for m in &run.epoch_metrics {
            let diag = nback_diagonal(attention_of(run, m, layer, head)?, run.n_back)?;
            for (k, &attention) in diag.iter().enumerate() {
                let position = run.n_back + k;
                points.push(AccuracyAttentionPoint {
                    seed: run.train_config.seed,
                    epoch: m.epoch,
                    position,
                    attention,
                    accuracy: m.per_position_accuracy[position],
                });
            }
        }
    }
    Ok(AccuracyAttentionPairs { points })
}

/// Coefficients of `y = a + b·ln x` with its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `ln xs`.
pub fn log_fit(xs: &[f64], ys: &[f64]) -> Result<LogFit, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::DegenerateFit(format!(
            "{} x values but {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().any(|&x| x.is_nan() || x <= 0.0) {
        return Err(AnalysisError::DegenerateFit(
            "x values must be positive".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if lx.len() < 2 || sxx == 0.0 {
        return Err(AnalysisError::DegenerateFit(
            "need at least two distinct x values".into(),
        ));
    }
    let sxy: f64 = lx.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - a - b * x).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LogFit { a, b, r_squared })
}

/// Mean and standard error of the mean (sample sd / √n; zero for n = 1).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Final-epoch entropy statistics for one `n_back`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropySummary {
    pub n_back: usize,
    /// Per-run mean entropy over test sequences.
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub sem: f64,
    pub mean_accuracy: f64,
}

/// Groups runs by `n_back` (ascending) and summarizes final-epoch entropy
/// of one head.
pub fn entropy_summary(
    runs: &[StoredRun],
    layer: usize,
    head: usize,
) -> Result<Vec<EntropySummary>, AnalysisError> {
    if runs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        let last = run
            .epoch_metrics
            .last()
            .ok_or(AnalysisError::MissingEpoch {
                seed: run.train_config.seed,
                n_back: run.n_back,
                epoch: 1,
            })?;
        let k = layer * run.model_config.n_heads + head;
        let h = *last.mean_entropy.get(k).ok_or(AnalysisError::MissingHead {
            seed: run.train_config.seed,
            layer,
            head,
        })?;
        let group = groups.entry(run.n_back).or_default();
        group.0.push(h);
        group.1.push(last.test_accuracy);
    }
    Ok(groups
        .into_iter()
        .map(|(n_back, (per_run, acc))| {
            let (mean, sem) = mean_sem(&per_run);
            EntropySummary {
                n_back,
                mean,
                sem,
                mean_accuracy: mean_sem(&acc).0,
                per_run,
            }
        })
        .collect())
}
