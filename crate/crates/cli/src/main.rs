//! `stum`: train, evaluate, ablate and benchmark spatio-temporal unitized
//! forecasters from a flat configuration file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::AblationAxis;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "stum", version, about = "Spatio-temporal unitized traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `section.key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.embed_dim=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set out_dir=...`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let env_seed = std::env::var("STUM_SEED").ok();
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides, env_seed.as_deref())?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and test artifacts.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the validation and test splits.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint base path without extension; defaults to `<out_dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Horizon steps to report, e.g. `3,6,12`.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
    /// Train one model per value along a sensitivity axis.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Median training-step time and parameter counts per configuration.
    Bench(ConfigArgs),
    /// Generate the synthetic fixture as flatbin plus edge list.
    Synth(ConfigArgs),
    /// Run the finite-difference gradient suite and print max errors.
    Gradcheck {
        #[arg(long, default_value_t = stum::gradcheck::SUITE_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// The engine runs serially, so any positive cap is already satisfied.
fn check_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STUM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("STUM_THREADS={v:?} must be a positive integer"))?;
        log::debug!("STUM_THREADS={n}; the engine is single-threaded");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    match cli.command {
        Command::Train(args) => commands::train(args.resolve()?),
        Command::Eval {
            config,
            checkpoint,
            horizons,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(h) = horizons {
                cfg.eval.horizons = h;
            }
            commands::evaluate(cfg, checkpoint)
        }
        Command::Ablate { config, axis, values } => commands::ablate(config.resolve()?, axis, &values).map(drop),
        Command::Bench(args) => commands::bench(args.resolve()?),
        Command::Synth(args) => commands::synth(args.resolve()?),
        Command::Gradcheck { step, tolerance } => commands::gradcheck(step, tolerance),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
