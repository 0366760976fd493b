//! Command-line driver for the scattering-halo magnetometry pipeline.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 analysis
//! failure, 3 I/O error.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use commands::CommandContext;
use config::FileConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Analysis(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Analysis(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    /// Print the machine-readable JSON summary.
    JsonLikeSummary,
    /// Print a human-readable table.
    Table,
}

#[derive(Debug, Args)]
struct CommonOpts {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "halomag-out")]
    out: PathBuf,
    /// Worker threads (results are identical for any value).
    #[arg(long)]
    threads: Option<usize>,
    /// Stdout rendering of the run summary.
    #[arg(long, value_enum, default_value_t = OutputFormat::JsonLikeSummary)]
    format: OutputFormat,
}

#[derive(Debug, Parser)]
#[command(
    name = "halomag",
    version,
    about = "Simulate spin-entangled scattering halos and reconstruct 3D magnetic field and gradient maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate ground-truth shots and detector events.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Invert events to normalised halo clouds with lensing correction.
    Reconstruct {
        #[command(flatten)]
        common: CommonOpts,
        /// Events table (defaults to <out>/events.tsv).
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Ramsey field tomography over cloud files.
    Tomography {
        #[command(flatten)]
        common: CommonOpts,
        /// Clouds table (defaults to <out>/clouds.tsv).
        #[arg(long)]
        clouds: Option<PathBuf>,
    },
    /// Parity gradiometry over cloud files.
    Gradiometry {
        #[command(flatten)]
        common: CommonOpts,
        /// Clouds table (defaults to <out>/clouds.tsv).
        #[arg(long)]
        clouds: Option<PathBuf>,
    },
    /// Closed-form versus Monte Carlo spatial-resolution table.
    Resolution {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Phase-uncertainty bounds versus detection efficiency.
    Bounds {
        #[command(flatten)]
        common: CommonOpts,
    },
}

impl Command {
    fn common(&self) -> &CommonOpts {
        match self {
            Command::Simulate { common }
            | Command::Reconstruct { common, .. }
            | Command::Tomography { common, .. }
            | Command::Gradiometry { common, .. }
            | Command::Resolution { common }
            | Command::Bounds { common } => common,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let config_text = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", common.config.display())))?;
    let file_config = FileConfig::parse(&config_text)?;
    let plan = file_config.plan(common.seed)?;
    let ctx = CommandContext {
        plan,
        config_text,
        out_dir: common.out.clone(),
        format: common.format,
    };
    let dispatch = || -> Result<(), CliError> {
        match &cli.command {
            Command::Simulate { .. } => commands::cmd_simulate(&ctx),
            Command::Reconstruct { events, .. } => {
                let path = events
                    .clone()
                    .unwrap_or_else(|| ctx.out_dir.join("events.tsv"));
                commands::cmd_reconstruct(&ctx, &path)
            }
            Command::Tomography { clouds, .. } => {
                let path = clouds
                    .clone()
                    .unwrap_or_else(|| ctx.out_dir.join("clouds.tsv"));
                commands::cmd_tomography(&ctx, &path)
            }
            Command::Gradiometry { clouds, .. } => {
                let path = clouds
                    .clone()
                    .unwrap_or_else(|| ctx.out_dir.join("clouds.tsv"));
                commands::cmd_gradiometry(&ctx, &path)
            }
            Command::Resolution { .. } => commands::cmd_resolution(&ctx),
            Command::Bounds { .. } => commands::cmd_bounds(&ctx),
        }
    };
    match common.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            pool.install(dispatch)
        }
        None => dispatch(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
