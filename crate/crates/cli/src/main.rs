mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigError;
use rgfs_core::RgfsError;

#[derive(Debug, Parser)]
#[command(name = "rgfs", version, about = "Reconstruction-guided few-shot training and evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overrides the top-level `seed` of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace outputs left by a previous run.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write loss.csv, checkpoints and manifest.json.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write accuracy.json.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Write the synthetic dataset as an image-folder tree.
    Synth,
    /// Write sample masks (PGM) and masked images (PNG).
    InspectMask,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<RgfsError>() {
            return if e.is_config() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train { resume } => commands::train(&cli.global, resume.as_deref()),
        Command::Eval { checkpoint } => commands::eval(&cli.global, &checkpoint),
        Command::Synth => commands::synth(&cli.global),
        Command::InspectMask => commands::inspect_mask(&cli.global),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
