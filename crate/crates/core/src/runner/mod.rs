//! Experiment grid over (layers, heads, N, seed) and the files derived
//! from a finished grid.
//!
//! Run directories live at `<root>/L{l}H{h}/N{n}/seed{k}/`. Each one is
//! written under `<root>/.partial/` and renamed into place when complete,
//! so a directory that exists is always whole. A run that fails holds a
//! `FAILED` file with the error instead of metrics.

mod outputs;

pub use outputs::{
    analyze, diagonal_csv, fig2a_csv, fig2b_csv, fig4_csv, fig5_csv, grid_summary_csv,
    load_run_tree, report, stats_table, summarize, table1_csv, write_grid_summary, Headline,
    RunTree, StatsTable, SummaryRow, TreeRun,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::dataset::{
    generate_dataset, save_dataset, Dataset, DatasetError, TEST_SIZE, TRAIN_SIZE,
};
use crate::model::ModelConfig;
use crate::stats::StatsError;
use crate::training::{train_model, write_run_dir, ArtifactError, TrainConfig, TrainError};

pub const FAILED_MARKER: &str = "FAILED";
pub const WORKERS_ENV: &str = "NBACK_WORKERS";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("not enough runs: {0}")]
    Missing(String),
}

pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub n_values: Vec<usize>,
    pub seeds_per_n: usize,
    pub layer_values: Vec<usize>,
    pub head_values: Vec<usize>,
    pub base_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_values: (1..=6).collect(),
            seeds_per_n: 50,
            layer_values: vec![1, 2],
            head_values: vec![1, 2, 4],
            base_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            parallelism: 0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: &str| Err(RunnerError::Config(m.into()));
        if self.n_values.is_empty() || self.layer_values.is_empty() || self.head_values.is_empty() {
            return bad("n_values, layer_values and head_values must be nonempty");
        }
        if self.seeds_per_n == 0 {
            return bad("seeds_per_n must be at least 1");
        }
        if self.n_values.iter().any(|&n| n == 0 || n > 16) {
            return bad("n_values must lie in 1..=16");
        }
        for key in self.keys() {
            self.model_for(&key).validate().map_err(|e| {
                RunnerError::Config(format!("L={} H={}: {e}", key.layers, key.heads))
            })?;
        }
        self.train
            .validate()
            .map_err(|e| RunnerError::Config(e.to_string()))?;
        Ok(())
    }

    /// Every run of the grid in a fixed order.
    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &layers in &self.layer_values {
            for &heads in &self.head_values {
                for &n_back in &self.n_values {
                    for seed_index in 0..self.seeds_per_n {
                        keys.push(RunKey {
                            layers,
                            heads,
                            n_back,
                            seed_index,
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn model_for(&self, key: &RunKey) -> ModelConfig {
        ModelConfig {
            n_layers: key.layers,
            n_heads: key.heads,
            ..self.model.clone()
        }
    }

    pub fn train_for(&self, key: &RunKey) -> TrainConfig {
        TrainConfig {
            seed: run_seed(self.base_seed, key),
            ..self.train.clone()
        }
    }

    pub fn dataset_seed(&self, n_back: usize) -> u64 {
        dataset_seed(self.base_seed, n_back)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub layers: usize,
    pub heads: usize,
    pub n_back: usize,
    pub seed_index: usize,
}

impl RunKey {
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(format!("L{}H{}", self.layers, self.heads))
            .join(format!("N{}", self.n_back))
            .join(format!("seed{}", self.seed_index))
    }

    /// Inverse of [`RunKey::relative_dir`] on its three components.
    pub fn parse(arch: &str, n: &str, seed: &str) -> Option<Self> {
        let (l, h) = arch.strip_prefix('L')?.split_once('H')?;
        Some(Self {
            layers: l.parse().ok()?,
            heads: h.parse().ok()?,
            n_back: n.strip_prefix('N')?.parse().ok()?,
            seed_index: seed.strip_prefix("seed")?.parse().ok()?,
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stable_hash(parts: &[u64]) -> u64 {
    parts.iter().fold(0, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// `base_seed` xor a hash of the run's coordinates; adding grid axes never
/// moves an existing run's seed.
pub fn run_seed(base_seed: u64, key: &RunKey) -> u64 {
    base_seed
        ^ stable_hash(&[
            key.layers as u64,
            key.heads as u64,
            key.n_back as u64,
            key.seed_index as u64,
        ])
}

const DATASET_TAG: u64 = 0x6461_7461;

/// One dataset per N, shared by every architecture and seed.
pub fn dataset_seed(base_seed: u64, n_back: usize) -> u64 {
    base_seed ^ stable_hash(&[DATASET_TAG, n_back as u64])
}

/// `NBACK_WORKERS` wins over the configured value; 0 means all cores.
pub fn resolve_workers(configured: usize, env: Option<&str>) -> Result<usize, RunnerError> {
    let requested = match env {
        Some(v) => v.trim().parse::<usize>().map_err(|_| {
            RunnerError::Config(format!("{WORKERS_ENV}={v:?} is not a worker count"))
        })?,
        None => configured,
    };
    Ok(if requested == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        requested
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Worker pool of the given size; without the `parallel` feature this
    /// runs sequentially.
    Parallel(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Failed(String),
    /// Directory already present from an earlier invocation.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub statuses: Vec<(RunKey, RunStatus)>,
    pub summary: Vec<SummaryRow>,
}

impl GridOutcome {
    pub fn failures(&self) -> Vec<(RunKey, &str)> {
        self.statuses
            .iter()
            .filter_map(|(k, s)| match s {
                RunStatus::Failed(e) => Some((*k, e.as_str())),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, wanted: fn(&RunStatus) -> bool) -> usize {
        self.statuses.iter().filter(|(_, s)| wanted(s)).count()
    }
}

fn remove_if_present(path: &Path) -> Result<(), RunnerError> {
    match fs::remove_dir_all(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io(path)(e)),
        _ => Ok(()),
    }
}

/// Trains one run and moves its directory into place.
pub fn execute_run(
    config: &GridConfig,
    dataset: &Dataset,
    key: &RunKey,
    root: &Path,
) -> Result<RunStatus, RunnerError> {
    let target = root.join(key.relative_dir());
    if target.exists() {
        return Ok(RunStatus::Skipped);
    }
    let partial = root.join(".partial").join(format!(
        "L{}H{}_N{}_seed{}",
        key.layers, key.heads, key.n_back, key.seed_index
    ));
    remove_if_present(&partial)?;
    fs::create_dir_all(&partial).map_err(io(&partial))?;

    let model = config.model_for(key);
    let train = config.train_for(key);
    let status = match train_model(dataset, &model, &train) {
        Ok(run) => {
            write_run_dir(&run, &partial, Some(config.dataset_seed(key.n_back)))?;
            RunStatus::Completed
        }
        Err(e @ (TrainError::Diverged { .. } | TrainError::Model(_))) => {
            let marker = partial.join(FAILED_MARKER);
            fs::write(&marker, format!("{e}\n")).map_err(io(&marker))?;
            RunStatus::Failed(e.to_string())
        }
        Err(e) => return Err(RunnerError::Config(e.to_string())),
    };
    let parent = target.parent().expect("run dirs are nested");
    fs::create_dir_all(parent).map_err(io(parent))?;
    fs::rename(&partial, &target).map_err(io(&target))?;
    Ok(status)
}

fn for_each_run<F>(
    keys: &[RunKey],
    execution: Execution,
    f: F,
) -> Vec<Result<RunStatus, RunnerError>>
where
    F: Fn(&RunKey) -> Result<RunStatus, RunnerError> + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel(workers) if workers > 1 => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                Ok(pool) => pool.install(|| keys.par_iter().map(&f).collect()),
                Err(_) => keys.iter().map(f).collect(),
            }
        }
        _ => keys.iter().map(f).collect(),
    }
}

/// Runs every missing (L, H, N, seed) of `config` under `root`, then writes
/// `grid_summary.csv` and returns the outcome.
pub fn run_grid(
    config: &GridConfig,
    root: &Path,
    execution: Execution,
) -> Result<GridOutcome, RunnerError> {
    config.validate()?;
    fs::create_dir_all(root).map_err(io(root))?;
    let data_dir = root.join("data");
    let mut datasets = Vec::new();
    for &n in &config.n_values {
        let dataset = generate_dataset(n, TRAIN_SIZE, TEST_SIZE, config.dataset_seed(n))?;
        save_dataset(&dataset, &data_dir)?;
        datasets.push((n, dataset));
    }
    let keys = config.keys();
    let results = for_each_run(&keys, execution, |key| {
        let dataset = &datasets
            .iter()
            .find(|(n, _)| *n == key.n_back)
            .expect("dataset per N")
            .1;
        execute_run(config, dataset, key, root)
    });
    let mut statuses = Vec::with_capacity(keys.len());
    for (key, result) in keys.into_iter().zip(results) {
        statuses.push((key, result?));
    }
    remove_if_present(&root.join(".partial"))?;
    let summary = write_grid_summary(config, root)?;
    Ok(GridOutcome { statuses, summary })
}
