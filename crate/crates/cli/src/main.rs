//! `segchain`: rollouts against a policy server, offline scoring, toy GRPO
//! training, VOS evaluation and training-data curation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod svg;

use config::{CommonArgs, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "segchain", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a saved answer transcript and report the format checklist
    Parse {
        /// Which round's answer format to expect
        #[arg(long, default_value_t = 1)]
        round: u8,
    },
    /// Recompute rewards for a rollout trace file against ground truth
    Score {
        /// Ground-truth manifest
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run rollout groups for every query of a manifest against a policy server
    Rollout,
    /// Train the toy policy with GRPO on synthetic episodes
    TrainToy {
        /// Also write reward.svg into the output directory
        #[arg(long)]
        svg: bool,
    },
    /// Score predicted masks against ground truth (J, F, J&F)
    Eval {
        /// Ground-truth manifest
        #[arg(long)]
        gt: PathBuf,
    },
    /// Drop videos whose tracker reconstruction disagrees with the annotations
    Curate {
        /// `oracle` replays the annotations; otherwise --tracker-url is used
        #[arg(long, value_parser = ["oracle"])]
        tracker: Option<String>,
        /// Where to write the decisions CSV (default: stdout)
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = RunConfig::resolve(cli.common)?;
    match cli.command {
        Command::Parse { round } => commands::parse(&config, round),
        Command::Score { gt } => commands::score(&config, &gt),
        Command::Rollout => commands::rollout(&config),
        Command::TrainToy { svg } => commands::train(&config, svg),
        Command::Eval { gt } => commands::eval(&config, &gt),
        Command::Curate { tracker, decisions } => {
            commands::curate(&config, tracker.is_some(), decisions)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
