use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tweedie_dglm_cli::config::{Overrides, RunConfig};
use tweedie_dglm_cli::{commands, error_kind};

/// Bayesian double generalized linear Tweedie models with spatial effects
/// and spike-and-slab variable selection.
#[derive(Debug, Parser)]
#[command(name = "tweedie-dglm", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes draws.csv, summary.csv, selection.csv, meta.json.
    Fit,
    /// Generate synthetic data sets (and optionally fit them).
    Simulate,
    /// Re-run FDR selection on the draws in --out.
    Select {
        /// truth.json from `simulate`, for recovery metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score --data at the posterior median of the fit in --out.
    Predict,
    /// Recompute summary.csv from the draws in --out.
    Summarize,
}

fn out_dir(flags: &Overrides) -> Result<PathBuf> {
    flags
        .out
        .clone()
        .ok_or_else(|| tweedie_dglm_cli::InputError("--out (a fit directory) is required".into()).into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit => commands::fit(&RunConfig::resolve(&cli.flags)?),
        Command::Simulate => commands::simulate(&RunConfig::resolve(&cli.flags)?),
        Command::Select { truth } => commands::select(&out_dir(&cli.flags)?, &cli.flags, truth.as_deref()),
        Command::Predict => {
            let data = cli
                .flags
                .data
                .clone()
                .ok_or_else(|| tweedie_dglm_cli::InputError("--data is required".into()))?;
            commands::predict(&out_dir(&cli.flags)?, &data)
        }
        Command::Summarize => commands::summarize(&out_dir(&cli.flags)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}");
            let body = serde_json::json!({ "error": { "kind": error_kind(&err), "message": msg } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
