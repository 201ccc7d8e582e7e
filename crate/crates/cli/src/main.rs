//! `mcsae` command-line driver.
//!
//! Runs the whole pipeline or a single stage from a TOML configuration.
//! Relative paths in the configuration resolve against its directory.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mcsae::pipeline::{Pipeline, Stage};

#[derive(Debug, Parser)]
#[command(
    name = "mcsae",
    version,
    about = "Small-area estimation with a linked non-probability proxy source"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "mcsae.toml")]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run only this stage (same as the stage subcommand).
    #[arg(long, global = true)]
    stage: Option<Stage>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the number of bootstrap replicates.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic population and sample.
    Simulate,
    /// Direct and MC point estimates, working model, propensities.
    Estimate,
    /// Bootstrap variances.
    Bootstrap,
    /// Fay–Herriot EBLUPs.
    Fh,
    /// Ybarra–Lohr benchmark.
    Yl,
    /// Estimates table, quality summaries and manifest.
    Report,
    /// Every configured stage in order.
    Run,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Simulate => Some(Stage::Simulate),
            Command::Estimate => Some(Stage::Estimate),
            Command::Bootstrap => Some(Stage::Bootstrap),
            Command::Fh => Some(Stage::Fh),
            Command::Yl => Some(Stage::Yl),
            Command::Report => Some(Stage::Report),
            Command::Run => None,
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut pipeline = Pipeline::from_file(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    pipeline.update(|c| {
        if let Some(seed) = cli.seed {
            c.seed = seed;
        }
        if let Some(out) = &cli.out {
            // Relative to the working directory, not the configuration file.
            c.out = std::env::current_dir()
                .map(|d| d.join(out))
                .unwrap_or_else(|_| out.clone());
        }
        if let Some(r) = cli.replicates {
            c.bootstrap.replicates = r;
            c.bootstrap.ipw_replicates = r;
        }
    })?;
    let stage = match (cli.command.as_ref().and_then(Command::stage), cli.stage) {
        (Some(a), Some(b)) if a != b => anyhow::bail!("subcommand `{a}` conflicts with --stage {b}"),
        (a, b) => a.or(b),
    };
    match stage {
        Some(stage) => pipeline.run_stage(stage)?,
        None => pipeline.run()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
