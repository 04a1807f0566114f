//! `fieldstat` command-line tool.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fieldstat",
    version,
    about = "Spatial analysis and design simulation for on-farm strip trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rotate, row-align, grid and trim raw yield points.
    Preprocess(Common),
    /// Write the treatment mask of every configured design.
    DesignPreview(Common),
    /// Fit OLS and REML spatial models to the grid.
    Fit(Common),
    /// Empirical and fitted residual variograms along both axes.
    Variogram(Common),
    /// Null and effect simulation experiments across designs and models.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if self.threads.is_some() {
            config.threads = self.threads;
        }
        config.validate()?;
        if let Some(n) = config.threads {
            fieldstat::par::configure_threads(n).map_err(|e| anyhow!(e))?;
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, command): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Preprocess(c) => (c, commands::preprocess),
        Command::DesignPreview(c) => (c, commands::design_preview),
        Command::Fit(c) => (c, commands::fit),
        Command::Variogram(c) => (c, commands::variogram),
        Command::Simulate(c) => (c, commands::simulate),
    };
    command(&common.load()?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
