//! `varred`: estimates, θ diagnostics, simulations and Monte Carlo sweeps
//! written as CSV plus aligned text tables.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 schema error in the
//! input data, 3 estimator domain violation, 4 invalid configuration or
//! command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{FileConfig, Flags, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(varred_core::Error),
}

impl From<varred_core::Error> for CliError {
    fn from(e: varred_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 4,
            CliError::Core(e) if e.is_schema() => 2,
            CliError::Core(e) if e.is_domain() => 3,
            CliError::Core(varred_core::Error::InvalidConfig(_) | varred_core::Error::InvalidParameter(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "varred", version, about = "Prediction-adjusted estimators for randomized experiments")]
struct Cli {
    /// TOML file supplying any flag; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Raw and adjusted estimates with jackknife CIs for an experiment CSV.
    Estimate(Flags),
    /// Optimal θ, per-arm θs and delta-method variances.
    Theta(Flags),
    /// Generate a population and export it with a balance report.
    Simulate(Flags),
    /// Replicated estimator spread across sample sizes.
    Sweep(Flags),
    /// Distribution of the log adjustment factor per fit mode.
    BiasCheck(Flags),
    /// Jackknife CI widths across sample sizes.
    CiSweep(Flags),
    /// Forecast CI reduction and sample-size equivalents from cv correlations.
    Report(Flags),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let (cmd, flags): (fn(&RunConfig) -> Result<output::Outputs, CliError>, Flags) = match cli.command {
        Command::Estimate(f) => (commands::estimate, f),
        Command::Theta(f) => (commands::theta, f),
        Command::Simulate(f) => (commands::simulate, f),
        Command::Sweep(f) => (commands::sweep, f),
        Command::BiasCheck(f) => (commands::bias_check, f),
        Command::CiSweep(f) => (commands::ci_sweep, f),
        Command::Report(f) => (commands::report, f),
    };
    let rc = RunConfig::resolve(flags, file)?;
    let outputs = cmd(&rc)?;
    for path in outputs.written() {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
