//! Command-line front end: simulate, fit, tune, evaluate and benchmark.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod io;

#[derive(Debug, Parser)]
#[command(name = "hetcggm", version, about = "Heterogeneous conditional Gaussian graphical models")]
pub struct Cli {
    /// Worker threads for tuning and benchmarking (default: all cores).
    #[arg(long, global = true, env = "HETCGGM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data set with known groups.
    Simulate(SimulateArgs),
    /// Fit the model at one (lambda1, lambda2, lambda3).
    Fit(FitArgs),
    /// Fit over a grid and keep the HQC minimizer.
    Tune(TuneArgs),
    /// Compare a fit against the truth.
    Evaluate(EvaluateArgs),
    /// Repeated simulate, tune and evaluate with a summary table.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct SimSpecArgs {
    /// s1, s2 or s3.
    #[arg(long)]
    pub setting: String,
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub q: usize,
    /// Group sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub spec: SimSpecArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Upper bound on the number of groups.
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// JSON object overriding any hyper-parameter field.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Responses, n x p with a header row.
    #[arg(long)]
    pub y: PathBuf,
    /// Regulators without intercept, n x q with a header row.
    #[arg(long)]
    pub x: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// lambda1 axis as lo:hi:count (geometric).
    #[arg(long)]
    pub grid1: Option<String>,
    #[arg(long)]
    pub grid2: Option<String>,
    #[arg(long)]
    pub grid3: Option<String>,
    /// JSON list of {"lambda1", "lambda2", "lambda3"} points.
    #[arg(long, conflicts_with_all = ["grid1", "grid2", "grid3"])]
    pub grid_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub spec: SimSpecArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub replicates: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command line and returns any warnings to report.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().context("cannot start worker pool")?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Tune(a) => commands::tune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Benchmark(a) => commands::benchmark(a),
    })
}
