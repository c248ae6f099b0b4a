//! `eexit`: train multi-exit classifiers, sweep exit thresholds and report
//! exit behaviour.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// A problem with the invocation or configuration rather than the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "eexit", version, about = "Early-exit training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a JSON-lines step log.
    Train(CommonArgs),
    /// Score a checkpoint at one threshold.
    Eval(CommonArgs),
    /// Accuracy/speed-up curves over a threshold grid, optionally for a
    /// grid of training hyperparameters.
    Sweep(CommonArgs),
    /// Exit histograms on train and dev, their distance, failure rates.
    Stats(CommonArgs),
    /// Write a synthetic dataset as CSV.
    GenData(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat TOML file of settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, UsageError> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(&self.run).resolved())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (args, run): (&CommonArgs, fn(&RunConfig) -> anyhow::Result<()>) = match &cli.command {
        Command::Train(a) => (a, commands::train),
        Command::Eval(a) => (a, commands::eval),
        Command::Sweep(a) => (a, commands::sweep),
        Command::Stats(a) => (a, commands::stats),
        Command::GenData(a) => (a, commands::gen_data),
    };
    let result = args.resolve().map_err(anyhow::Error::from).and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
