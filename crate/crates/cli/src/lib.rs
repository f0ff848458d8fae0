//! The `rectiflow` command line: train, reflow, sample, eval and bench.
//!
//! Every command is deterministic given its flags and seed; only the
//! wall-clock fields of manifests and bench tables vary between runs.
//! `RECTIFLOW_THREADS` caps internal parallelism (default 1).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod dataset;
pub mod manifest;
pub mod recipe;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] rectiflow::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rectiflow", version = manifest::BUILD_ID, about = "Train and sample rectified flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a round-1 model on independent (noise, data) pairs.
    Train(TrainArgs),
    /// Retrain on the model's own (noise, endpoint) pairs: round k to k+1.
    Reflow(ReflowArgs),
    /// Integrate noise to samples.
    Sample(SampleArgs),
    /// Append one metric row to a CSV.
    Eval(EvalArgs),
    /// Time solvers on one fixed batch.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// euler or rk45.
    #[arg(long)]
    pub solver: Option<String>,
    /// Euler step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// RK45 absolute tolerance.
    #[arg(long)]
    pub atol: Option<f64>,
    /// RK45 relative tolerance.
    #[arg(long)]
    pub rtol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Recipe file.
    #[arg(long)]
    pub config: PathBuf,
    /// Benchmark name, toy_mel, offset:a,b or a CSV file; overrides the recipe.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the recipe's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReflowArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of generated pairs; defaults to the recipe's reflow.pairs.
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Seeds pair generation; defaults to the recipe seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Condition bundle shared by every generated pair.
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Also export the generated pairs as CSV.
    #[arg(long)]
    pub pairs_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Condition bundle for every row of a conditional model.
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write every integration path as `row,t,dim0,...`.
    #[arg(long)]
    pub dump_traj: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// straightness, energy, onestep-gap or conversion.
    #[arg(long)]
    pub metric: String,
    /// Rows (or conversion trials).
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Solver for energy, onestep-gap (the adaptive side) and conversion.
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Reference data; defaults to what the model was trained on.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma list of euler:N, rk45 or rk45:ATOL:RTOL.
    #[arg(long, default_value = "euler:1,euler:30,rk45")]
    pub solvers: String,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Timed runs per solver after one untimed warm-up; at least 3.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one command and returns a one-line summary.
pub fn run(cli: Cli) -> CliResult<String> {
    let threads = threads_from_env(std::env::var("RECTIFLOW_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Reflow(args) => commands::reflow(&args, threads),
        Command::Sample(args) => commands::sample(&args, threads),
        Command::Eval(args) => commands::eval(&args, threads),
        Command::Bench(args) => commands::bench(&args),
    }
}

pub fn threads_from_env(value: Option<&str>) -> CliResult<usize> {
    match value.map(str::trim) {
        None | Some("") => Ok(1),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "RECTIFLOW_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}
