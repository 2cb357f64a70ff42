//! Experiment front end: TOML run configs in, reports, CSV tables and SVG
//! figures out.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use clap::{Parser, ValueEnum};
use commands::Status;
pub use config::RunConfig;
pub use error::CliError;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synthesize,
    Fig1,
    Fig2,
    Fig3,
    Robustness,
}

#[derive(Debug, Parser)]
#[command(name = "oclab", about = "CLF-shaped optimal control experiments", version)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Runs one command and returns its exit status.
pub fn execute(command: Command, cfg: &RunConfig, out: &Path) -> Result<Status, CliError> {
    Ok(match command {
        Command::Synthesize => commands::synthesize_cmd(cfg, out)?.1,
        Command::Fig1 => commands::fig1(cfg, out)?.status,
        Command::Fig2 => commands::fig2(cfg, out)?.status,
        Command::Fig3 => commands::fig3(cfg, out)?.status,
        Command::Robustness => commands::robustness(cfg, out)?.status,
    })
}

/// Parses the config, applies overrides and runs; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let outcome = RunConfig::load(&cli.config).and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.out.as_ref().map(PathBuf::from))
            .ok_or_else(|| CliError::Config("out: pass --out or set `out` in the config".into()))?;
        execute(cli.command, &cfg, &out).map(|s| (s, out))
    });
    match outcome {
        Ok((status, out)) => {
            let msg = match status {
                Status::Passed => "all checks passed",
                Status::ScanFailed => "bound checks failed",
                Status::Infeasible => "hypotheses infeasible; nothing solved",
            };
            eprintln!("{msg}; artifacts in {}", out.display());
            status.exit_code()
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
