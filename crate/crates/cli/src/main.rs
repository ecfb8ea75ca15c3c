//! Command-line driver for the skipcross road segmentation pipeline.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::Resolved;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "skipcross",
    version,
    about = "LiDAR/camera road segmentation with skip-cross fusion"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides [run] seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides [run] out (for `project`, the output file)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Checkpoint read by `eval` and `predict`
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Forces single-threaded numeric paths
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic train and val datasets in KITTI layout
    Synth,
    /// Projects a point cloud to a normalized ADI image (PGM)
    Project {
        #[arg(long, value_name = "PATH")]
        cloud: PathBuf,
        #[arg(long, value_name = "PATH")]
        calib: PathBuf,
    },
    /// Trains a network and writes checkpoints and history
    Train,
    /// Evaluates a checkpoint and writes a JSON metrics report
    Eval,
    /// Writes confidence and mask images for one sample
    Predict {
        /// Camera image at <root>/image_2/<stem>.ppm
        #[arg(long, value_name = "PATH")]
        sample: PathBuf,
    },
    /// Trains every configured strategy and prints a ranked table
    Compare,
    /// Runs the 64-bit finite-difference gradient suite
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut resolved = Resolved::load(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        resolved.set("run", "seed", &seed.to_string())?;
    }
    let project_out = match (&cli.command, &cli.common.out) {
        (Command::Project { .. }, Some(out)) => Some(out.clone()),
        (Command::Project { .. }, None) => {
            return Err(CliError::Usage("project needs --out FILE".into()))
        }
        (_, Some(out)) => {
            resolved.set("run", "out", &out.display().to_string())?;
            None
        }
        _ => None,
    };
    if cli.common.deterministic {
        resolved.set("run", "deterministic", "true")?;
    }
    let cfg = resolved.to_config()?;
    if cfg.deterministic {
        log::debug!("deterministic run: numeric kernels are single-threaded");
    }
    let checkpoint = || {
        cli.common
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Usage("this command needs --checkpoint PATH".into()))
    };
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &resolved),
        Command::Project { cloud, calib } => commands::project(
            &cfg,
            &resolved,
            cloud,
            calib,
            project_out.as_deref().expect("checked"),
        ),
        Command::Train => commands::train(&cfg, &resolved),
        Command::Eval => commands::eval(&cfg, &resolved, &checkpoint()?),
        Command::Predict { sample } => commands::predict(&cfg, &resolved, &checkpoint()?, sample),
        Command::Compare => commands::compare(&cfg, &resolved),
        Command::Gradcheck => commands::gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let keys = config::keys_help();
    let command = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match command
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
