//! `bls`: tuning runs, derivative checks, bound studies and landscape
//! exports for bilevel problems.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::output::Format;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("output error: {0}")]
    Io(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("verification failure: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bls", version, about = "Bilevel sensitivity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run upper-level optimizers and write one trace per (seed, method)
    Tune(Common),
    /// Compare implicit derivatives with finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Report tolerance breaches without failing
        #[arg(long)]
        expect_inexact: bool,
    },
    /// Measure derivative errors at perturbed lower solutions against their bounds
    Bounds(Common),
    /// Evaluate the upper loss on the PCA plane of an optimization path
    Landscape(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel seed runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output format (overrides the config's `format`)
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn context(common: &Common, cfg: &RunConfig, expect_inexact: bool) -> Result<Context, CliError> {
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    Ok(Context {
        out,
        format: common.format.or(cfg.format).unwrap_or(Format::Csv),
        pool,
        expect_inexact,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, expect_inexact) = match &cli.command {
        Command::Tune(c) | Command::Bounds(c) | Command::Landscape(c) => (c, false),
        Command::Gradcheck {
            common,
            expect_inexact,
        } => (common, *expect_inexact),
    };
    let cfg = RunConfig::load(&common.config)?;
    let ctx = context(common, &cfg, expect_inexact)?;
    match cli.command {
        Command::Tune(_) => commands::tune(&cfg, &ctx),
        Command::Gradcheck { .. } => commands::gradcheck_cmd(&cfg, &ctx),
        Command::Bounds(_) => commands::bounds(&cfg, &ctx),
        Command::Landscape(_) => commands::landscape(&cfg, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bls: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
