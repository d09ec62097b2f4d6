//! `nback`: generate datasets, train models, run grids and analyze them.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 one or more runs failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nback_core::dataset::{generate_dataset, load_dataset, save_dataset, TEST_SIZE, TRAIN_SIZE};
use nback_core::model::{InitScheme, ModelConfig};
use nback_core::runner::{
    self, load_run_tree, resolve_workers, run_grid, stats_table, table1_csv, Execution, GridConfig,
    Headline, FAILED_MARKER, WORKERS_ENV,
};
use nback_core::training::{train_model, write_run_dir, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "nback",
    version,
    about = "Attention-only transformers on the N-back task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write nback{N}_train.jsonl and nback{N}_test.jsonl.
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=16))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TRAIN_SIZE)]
        train_size: usize,
        #[arg(long, default_value_t = TEST_SIZE)]
        test_size: usize,
    },
    /// Train one model and write its run directory.
    Train {
        /// Directory holding the dataset files written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=16))]
        n: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run every (layers, heads, N, seed) combination; completed runs are skipped.
    Grid {
        /// JSON grid config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long = "layer-values", value_delimiter = ',')]
        layer_values: Option<Vec<usize>>,
        #[arg(long = "head-values", value_delimiter = ',')]
        head_values: Option<Vec<usize>>,
        #[arg(long)]
        base_seed: Option<u64>,
        /// Worker threads (0 = all cores); NBACK_WORKERS takes precedence.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write figure tables and attention heatmaps into <runs>/analysis.
    Analyze {
        #[arg(long)]
        runs: PathBuf,
        #[command(flatten)]
        headline: HeadlineArgs,
    },
    /// Write the Kruskal–Wallis / Mann–Whitney table.
    Stats {
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to <runs>/table1.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        headline: HeadlineArgs,
    },
    /// Write a markdown summary of the grid.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to <runs>/report.md.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        headline: HeadlineArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Gaussian,
    FanIn,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long)]
    no_residual: bool,
    #[arg(long, value_enum, default_value = "fan-in")]
    init: InitArg,
    #[arg(long)]
    init_std: Option<f64>,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let defaults = ModelConfig::default();
        ModelConfig {
            n_layers: self.layers,
            n_heads: self.heads,
            d_model: self.d_model,
            use_residual: !self.no_residual,
            init: match self.init {
                InitArg::Gaussian => InitScheme::Gaussian,
                InitArg::FanIn => InitScheme::FanIn,
            },
            init_std: self.init_std.unwrap_or(defaults.init_std),
            ..defaults
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct HeadlineArgs {
    /// Architecture used for the single-configuration outputs.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// N whose attention maps are drawn.
    #[arg(long, default_value_t = 3)]
    heatmap_n: usize,
    /// N groups compared in the statistics table.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    table_n: Vec<usize>,
}

impl HeadlineArgs {
    fn headline(&self) -> Headline {
        Headline {
            layers: self.layers,
            heads: self.heads,
            heatmap_n: self.heatmap_n,
            table_n_values: self.table_n.clone(),
        }
    }
}

enum Failure {
    Data(String),
    Runs(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Runs(_) => 3,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen {
            n,
            seed,
            out,
            train_size,
            test_size,
        } => {
            let dataset =
                generate_dataset(n as usize, train_size, test_size, seed).map_err(data)?;
            save_dataset(&dataset, &out).map_err(data)?;
            println!(
                "wrote {} train and {} test instances for N={n} to {}",
                dataset.train.len(),
                dataset.test.len(),
                out.display()
            );
        }
        Command::Train {
            data: dir,
            n,
            out,
            seed,
            model,
            train,
        } => {
            let dataset = load_dataset(&dir, n as usize).map_err(data)?;
            let model = model.config();
            let train = TrainConfig {
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                seed,
                ..TrainConfig::default()
            };
            match train_model(&dataset, &model, &train) {
                Ok(run) => {
                    write_run_dir(&run, &out, None).map_err(data)?;
                    let last = run.final_metrics();
                    println!(
                        "N={n} epochs={} loss={:.4} accuracy={:.4} -> {}",
                        last.epoch,
                        last.train_loss,
                        last.test_accuracy,
                        out.display()
                    );
                }
                Err(e @ TrainError::Diverged { .. }) => {
                    fs::create_dir_all(&out).map_err(data)?;
                    write_file(&out.join(FAILED_MARKER), &format!("{e}\n"))?;
                    return Err(Failure::Runs(e.to_string()));
                }
                Err(e) => return Err(data(e)),
            }
        }
        Command::Grid {
            config,
            out,
            n_values,
            seeds,
            layer_values,
            head_values,
            base_seed,
            workers,
            d_model,
            epochs,
            lr,
        } => {
            let mut grid = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
                    serde_json::from_str::<GridConfig>(&text)
                        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
                }
                None => GridConfig::default(),
            };
            if let Some(v) = n_values {
                grid.n_values = v;
            }
            if let Some(v) = seeds {
                grid.seeds_per_n = v;
            }
            if let Some(v) = layer_values {
                grid.layer_values = v;
            }
            if let Some(v) = head_values {
                grid.head_values = v;
            }
            if let Some(v) = base_seed {
                grid.base_seed = v;
            }
            if let Some(v) = workers {
                grid.parallelism = v;
            }
            if let Some(v) = d_model {
                grid.model.d_model = v;
            }
            if let Some(v) = epochs {
                grid.train.epochs = v;
            }
            if let Some(v) = lr {
                grid.train.lr = v;
            }
            let env = std::env::var(WORKERS_ENV).ok();
            let workers = resolve_workers(grid.parallelism, env.as_deref()).map_err(data)?;
            let outcome = run_grid(&grid, &out, Execution::Parallel(workers)).map_err(data)?;
            println!(
                "{} runs: {} completed, {} skipped, {} failed",
                outcome.statuses.len(),
                outcome.count(|s| matches!(s, runner::RunStatus::Completed)),
                outcome.count(|s| matches!(s, runner::RunStatus::Skipped)),
                outcome.failures().len()
            );
            let failures = outcome.failures();
            if !failures.is_empty() {
                for (key, err) in &failures {
                    eprintln!("{}: {err}", key.relative_dir().display());
                }
                return Err(Failure::Runs(format!("{} runs failed", failures.len())));
            }
        }
        Command::Analyze { runs, headline } => {
            for path in runner::analyze(&runs, &headline.headline()).map_err(data)? {
                println!("{}", path.display());
            }
        }
        Command::Stats {
            runs,
            out,
            headline,
        } => {
            let tree = load_run_tree(&runs).map_err(data)?;
            let table = stats_table(&tree, &headline.headline()).map_err(data)?;
            let out = out.unwrap_or_else(|| runs.join("table1.csv"));
            let csv = table1_csv(&table);
            write_file(&out, &csv)?;
            print!("{csv}");
        }
        Command::Report {
            runs,
            out,
            headline,
        } => {
            let text = runner::report(&runs, &headline.headline()).map_err(data)?;
            let out = out.unwrap_or_else(|| runs.join("report.md"));
            write_file(&out, &text)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Data(m) | Failure::Runs(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
