//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage/parse/schema/I-O errors, 3 infeasible
//! parameters, 4 integration failure, 5 averaging condition or root failure,
//! 6 periodic-orbit refinement failure.

mod commands;
pub mod output;

use crate::averaging::AveragingError;
use crate::config::ConfigError;
use crate::scenarios::ScenarioError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "lactodyn", version, about = "Fast-slow lactate kinetics: simulation, equilibria, averaging, shooting")]
pub struct Cli {
    /// Print reports as JSON instead of `key = value` lines.
    #[arg(long, global = true)]
    pub json: bool,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Config file; without it the built-in (or seeded) scenario is used.
    pub config: Option<PathBuf>,
    /// Built-in scenario to start from: dip, buffer or sensitivity.
    #[arg(long)]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Timeseries,
    Phase,
    ManifoldOverlay,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one or more configs and write `<prefix>.csv` and `<prefix>.manifest`.
    Simulate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Override the model declared in the config (2d or 4d).
        #[arg(long)]
        model: Option<String>,
        /// Output prefix; with several configs it is joined with each config's stem.
        #[arg(long)]
        out: Option<String>,
        /// Run up to N configs concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Closed-form stationary point at the inputs' initial levels.
    Equilibrium {
        #[command(flatten)]
        source: Source,
        /// Also write the report as a one-row CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Critical-manifold attraction bound, or a manifold slice with `--slice`.
    Manifold {
        #[command(flatten)]
        source: Source,
        /// Emit the manifold grid as CSV on stdout.
        #[arg(long)]
        slice: bool,
        #[arg(long, default_value_t = 65)]
        points: usize,
        #[arg(long)]
        x_min: Option<f64>,
        #[arg(long)]
        x_max: Option<f64>,
        #[arg(long)]
        v_min: Option<f64>,
        #[arg(long)]
        v_max: Option<f64>,
        /// Time at which the input is frozen for the slice.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Averaging conditions, predicted periodic orbit and its shooting refinement.
    Average {
        #[command(flatten)]
        source: Source,
        /// Forcing period when no configured signal is periodic.
        #[arg(long)]
        period: Option<f64>,
    },
    /// Dip protocol report.
    Dip {
        #[command(flatten)]
        source: Source,
        /// Write `t,x,y,x_target` samples here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Repeated-stimulus buffering report with the shooting comparison.
    Buffer {
        #[command(flatten)]
        source: Source,
        /// Write the per-period stroboscopic table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sign table of the 4D stationary point under control changes.
    Sensitivity {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Plot-ready columns from a trajectory CSV.
    Plotdata {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotKind::Timeseries)]
        kind: PlotKind,
        /// Config supplying parameters and F(t) for the manifold overlay.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<String>,
        /// Two columns for the phase plane, e.g. `u,v` (default `x,y`).
        #[arg(long, default_value = "x,y")]
        plane: String,
    },
    /// Print a built-in scenario as a config file.
    Defaults {
        #[arg(default_value = "dip")]
        name: String,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(ConfigError),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("averaging failed: {0}")]
    Averaging(String),
    #[error("periodic-orbit refinement failed: {0}")]
    Refinement(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::Io { .. } => 2,
            Self::Infeasible(_) => 3,
            Self::Integration(_) => 4,
            Self::Averaging(_) => 5,
            Self::Refinement(_) => 6,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Equilibrium(_) | ScenarioError::Manifold(_) => Self::Infeasible(e.to_string()),
            ScenarioError::Integration(_) => Self::Integration(e.to_string()),
            ScenarioError::UnknownScenario(_) | ScenarioError::Invalid(_) | ScenarioError::Signal(_) => {
                Self::Usage(e.to_string())
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Scenario(inner) => inner.into(),
            other => Self::Config(other),
        }
    }
}

impl From<AveragingError> for CliError {
    fn from(e: AveragingError) -> Self {
        match e {
            AveragingError::RefinementNonConvergence { .. } => Self::Refinement(e.to_string()),
            AveragingError::Integration(_) => Self::Integration(e.to_string()),
            AveragingError::Manifold(_) | AveragingError::Model(_) => Self::Infeasible(e.to_string()),
            _ => Self::Averaging(e.to_string()),
        }
    }
}

/// Parses `args` and runs the command, writing reports to `out`. Returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match commands::dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with(std::env::args_os(), &mut lock)
}
