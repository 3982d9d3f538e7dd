mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use survmix::error::Error;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "survmix",
    version,
    about = "Multimodal mixture survival model with counterfactual treatment effects"
)]
struct Cli {
    /// JSON run configuration; keys left out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one scalar key, e.g. `--set model.head.bins=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort with planted subgroups and its truth sidecar.
    Simulate,
    /// Fit the model and write a checkpoint, metrics and the loss curve.
    Train,
    /// Score a cohort: concordance, integrated Brier score and curves.
    Eval,
    /// Per-patient survival curves, optionally under a forced treatment arm.
    Predict,
    /// Subgroup assignment and per-group treatment effects.
    Phenotype,
    /// Two-dimensional projections of the latent spaces.
    Embed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data { .. }
        | Error::Schema(_)
        | Error::Csv(_)
        | Error::Io(_)
        | Error::Checkpoint(_)
        | Error::InvalidInput(_) => 3,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        Error::Shape { .. } | Error::Json(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = || -> survmix::error::Result<()> {
        let cfg = RunConfig::resolve(&Overrides {
            config: cli.config.as_deref(),
            seed: cli.seed,
            out: cli.out.as_deref(),
            set: &cli.set,
        })?;
        match cli.command {
            Command::Simulate => commands::simulate(&cfg),
            Command::Train => commands::train_cmd(&cfg),
            Command::Eval => commands::eval(&cfg),
            Command::Predict => commands::predict(&cfg),
            Command::Phenotype => commands::phenotype(&cfg),
            Command::Embed => commands::embed(&cfg),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
