mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use urank::model::LossKind;
use urank::solver::StepRule;

/// Lasso-penalized pairwise ranking.
#[derive(Parser, Debug)]
#[command(name = "urank", version, about)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a ranking rule to a CSV dataset.
    Fit(FitFlags),
    /// Score pairs with a fitted rule.
    Rank(RankFlags),
    /// Report the data-driven penalty, weights and envelope check.
    Tune(TuneFlags),
    /// Gram matrix, compatibility constants, margin and oracle diagnostics.
    Diagnose(DiagnoseFlags),
    /// Draw a dataset from the Gaussian linear model.
    Simulate(SimulateFlags),
    /// Excess-risk rate sweep over sample sizes.
    Rates(RatesFlags),
    /// Frequency with which the oracle inequality holds.
    Oracle(OracleFlags),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    None,
    Normalize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StepFlag {
    FixedOverSqrtK,
    Backtracking,
}

impl From<StepFlag> for StepRule {
    fn from(s: StepFlag) -> Self {
        match s {
            StepFlag::FixedOverSqrtK => StepRule::FixedOverSqrtK,
            StepFlag::Backtracking => StepRule::Backtracking,
        }
    }
}

#[derive(Args, Debug, Serialize, Default)]
pub struct SolverFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    step_rule: Option<StepFlag>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_step: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct FitFlags {
    /// Input CSV with columns x1..xd and y.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<LossKind>,
    /// Score bound for truncated_quadratic and exponential losses.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sup_bound: Option<f64>,
    /// `linear` or `sign`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    basis: Option<String>,
    /// `auto`, `cv`, or a number.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<WeightMode>,
    /// Constant in the data-driven penalty.
    #[arg(long = "B")]
    #[serde(rename = "b", skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    /// Cross-validation grid: `a,b,c` or `logspace(a,b,count)`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[command(flatten)]
    solver: SolverFlags,
    /// JSON file with any of the above; flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output JSON (default: stdout).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct RankFlags {
    /// JSON written by `fit`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    /// CSV whose rows are x followed by x'.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pairs: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TuneFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<LossKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sup_bound: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    basis: Option<String>,
    #[arg(long = "B")]
    #[serde(rename = "b", skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    /// Also cross-validate over this grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DiagnoseFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateFlags {
    /// Comma-separated true coefficients.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    theta0: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_ambient: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct RatesFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    replications: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory for records.csv, medians.csv and summary.json.
    #[arg(long)]
    #[serde(skip)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct OracleFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    replications: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<urank::Error> for CliError {
    fn from(e: urank::Error) -> Self {
        let code = if matches!(e, urank::Error::SizeLimit(_)) { 3 } else { 2 };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(f) => commands::fit(f),
        Command::Rank(f) => commands::rank(f),
        Command::Tune(f) => commands::tune(f),
        Command::Diagnose(f) => commands::diagnose(f),
        Command::Simulate(f) => commands::simulate(f),
        Command::Rates(f) => commands::rates(f),
        Command::Oracle(f) => commands::oracle(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
