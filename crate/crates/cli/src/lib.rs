//! `mlselect`: feature-set selection, evaluation statistics, simulation,
//! training and plotting behind one command-line tool.

pub mod analysis;
pub mod commands;
pub mod manifest;
pub mod report;
pub mod settings;
pub mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

/// Exit status contract: 0 success, 1 usage, 2 input parse, 3 infeasible
/// or degenerate result.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0:#}")]
    Io(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mlselect", version, about = "Mid-level feature selection, analysis, simulation and training")]
pub struct Cli {
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smallest feature set covering the dictionary.
    Select(SelectArgs),
    /// Feature set and transfer choices from a transfer graph.
    TransferSelect(TransferArgs),
    /// Significance tables, relative rewards and the rank-reversal graph.
    Analyze(AnalyzeArgs),
    /// Run baseline or trained policies in the grid world.
    Simulate(SimulateArgs),
    /// Train a linear-softmax policy with replay PPO.
    Train(TrainArgs),
    /// Render SVG plots from analysis or training output.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Affinity matrix (delimited with a `source,...` header, or JSON).
    #[arg(long)]
    pub affinities: Option<PathBuf>,
    /// Maximum set size; the threshold is maximized.
    #[arg(long, conflicts_with = "delta")]
    pub k: Option<usize>,
    /// Coverage threshold; the set size is minimized.
    #[arg(long)]
    pub delta: Option<f64>,
    /// `min_size` or `max_perf` (prefer higher mean affinity among ties).
    #[arg(long)]
    pub objective: Option<String>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Feature budget; picks the largest feasible threshold.
    #[arg(long)]
    pub budget: Option<usize>,
    /// `min_size` or `max_perf`; overrides the problem file.
    #[arg(long)]
    pub objective: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Episode log (`task,condition,seed,episode,reward`).
    #[arg(long, conflicts_with = "p_values")]
    pub episodes: Option<PathBuf>,
    /// `label,p[,reward]` list to adjust directly.
    #[arg(long)]
    pub p_values: Option<PathBuf>,
    /// Task label for a p-value list.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub baseline: Option<String>,
    /// Descending significance levels, comma separated.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Condition used as the relative-reward reference.
    #[arg(long)]
    pub blind: Option<String>,
    /// Reward floor per task as `task=value`, comma separated.
    #[arg(long)]
    pub r_min: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// nav, explore or plan.
    #[arg(long)]
    pub task: Option<String>,
    /// Floor plan (ASCII art or JSON).
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// `random`, `blind`, or a trained policy file.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Condition name written to the log; defaults to the policy name.
    #[arg(long)]
    pub condition: Option<String>,
    /// Append to an existing log instead of replacing it.
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: Option<String>,
    /// Floor plan; an open 10x10 room when omitted.
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training or task setting as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Analysis or training summary JSON.
    #[arg(long = "in")]
    pub input: PathBuf,
}

/// Parses `args` and runs the command, printing results and diagnostics.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
