//! `telegraph`: reproducible simulation, rate estimation and feedback runs.
//!
//! Exit codes: 0 ok, 1 config error, 2 runtime error, 3 rate estimation did
//! not converge.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use telegraph_core::config::ExperimentConfig;
use telegraph_core::controller::PolicyMode;
use telegraph_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "telegraph",
    version,
    about = "Telegraph process simulation, Bayesian estimation and feedback control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate open-loop traces.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write -1 in the true_state column.
        #[arg(long)]
        withhold_truth: bool,
    },
    /// Grid-based rate estimation on trace files, or on freshly simulated traces.
    EstimateRates {
        #[command(flatten)]
        common: Common,
        /// Rate-marginal snapshot interval in bins for the posterior-evolution files.
        #[arg(long, default_value_t = 100)]
        snapshot_every: usize,
        #[arg(value_name = "TRACE_FILE")]
        inputs: Vec<PathBuf>,
    },
    /// Closed-loop runs with the controller in the loop.
    Feedback {
        #[command(flatten)]
        common: Common,
    },
    /// Mean p1 of the rate equations against the repump rate.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Filter trace files and report occupancies, dwell and recovery times.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(value_name = "TRACE_FILE", required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config file (flat key = value).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Number of traces.
    #[arg(long, value_name = "N")]
    traces: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Bin time of simulator and filter.
    #[arg(long, value_name = "X")]
    bin_time_ms: Option<f64>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PolicyArg {
    Simple,
    Optimal,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    NotConverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::NotConverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::NotConverged(m) => m,
        }
    }

    pub fn config(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

/// Errors that can only come from the configured values count as config
/// errors wherever they surface.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidRates(_)
            | Error::InvalidPhotonModel(_)
            | Error::InvalidSimConfig(_)
            | Error::InvalidGrid(_)
            | Error::CapExceeded { .. }
            | Error::InvalidPolicy(_)
            | Error::GuardViolated { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl Common {
    /// Loads `--config` (or `default`), applies the flag overrides and validates.
    fn resolve(&self, default: ExperimentConfig) -> Result<ExperimentConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(Failure::config)?,
            None => default,
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(n) = self.traces {
            c.n_traces = n;
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        if let Some(ms) = self.bin_time_ms {
            c.set_bin_time_ms(ms);
        }
        if let Some(p) = self.policy {
            c.policy.get_or_insert_with(Default::default).mode = match p {
                PolicyArg::Simple => PolicyMode::SimpleThreshold,
                PolicyArg::Optimal => PolicyMode::OptimalT,
            };
        }
        c.validate().map_err(Failure::config)?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            common,
            withhold_truth,
        } => commands::simulate(
            &common.resolve(ExperimentConfig::default())?,
            withhold_truth,
        ),
        Command::EstimateRates {
            common,
            snapshot_every,
            inputs,
        } => commands::estimate_rates(
            &common.resolve(ExperimentConfig::estimation_default())?,
            &inputs,
            snapshot_every,
        ),
        Command::Feedback { common } => {
            commands::feedback(&common.resolve(ExperimentConfig::feedback_default())?)
        }
        Command::Sweep { common } => commands::sweep(&common.resolve(ExperimentConfig::default())?),
        Command::Analyze { common, inputs } => {
            commands::analyze(&common.resolve(ExperimentConfig::default())?, &inputs)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let kind = match f {
                Failure::Config(_) => "config error",
                Failure::Runtime(_) => "error",
                Failure::NotConverged(_) => "not converged",
            };
            eprintln!("telegraph: {kind}: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
