// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line driver for the staged pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nspu::pipeline::{AlphaSpec, Pipeline, RunConfig, Stage};
use nspu::{NspuError, Result};

#[derive(Debug, Parser)]
#[command(name = "nspu", version, about = "Shadow unlearning pipeline")]
struct Cli {
    /// Stage to run: gen-data, anonymize, train-lm, train-projector,
    /// build-subspace, apply-filter, evaluate, drift, flops or run-all.
    stage_arg: Option<String>,
    /// Same as the positional stage.
    #[arg(long = "stage", conflicts_with = "stage_arg")]
    stage: Option<String>,
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory override.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed filter strength.
    #[arg(long, conflicts_with = "alpha_grid")]
    alpha: Option<f64>,
    /// Comma-separated grid of filter strengths.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.output {
        config.output_dir = dir;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(a) = cli.alpha {
        config.alpha = AlphaSpec::Value(a);
    }
    if let Some(grid) = cli.alpha_grid {
        config.alpha = AlphaSpec::Grid(grid);
    }
    if cli.print_config {
        config.validate()?;
        print!("{}", config.to_toml());
        return Ok(());
    }
    let name = cli
        .stage
        .or(cli.stage_arg)
        .ok_or_else(|| NspuError::Config("no stage given; try `nspu run-all`".into()))?;
    let stage: Stage = name.parse()?;
    let pipeline = Pipeline::new(config)?;
    for outcome in pipeline.run(stage)? {
        let state = if outcome.skipped { "up to date" } else { "done" };
        eprintln!(
            "{:<16} {state:<10} {:>8.1}s",
            outcome.stage.name(),
            outcome.elapsed.as_secs_f64()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
