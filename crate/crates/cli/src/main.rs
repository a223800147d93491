//! `dgfn`: gradient checks, parameter reports, training, evaluation and data
//! export for deformable Gabor feature networks.
//!
//! Exit codes: 0 ok, 1 check failed, 2 config error, 3 numeric failure,
//! 4 shape mismatch.

// `!(x > 0.0)` is meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliResult;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "dgfn", version, about = "Deformable Gabor feature networks", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const AFTER_HELP: &str =
    "Exit codes: 0 ok, 1 check failed, 2 config error, 3 numeric failure, 4 shape mismatch.\n\
Outputs go to the config's `output`, else $DGFN_OUT/<command>, else dgfn-out/<command>.";

#[derive(Args)]
struct Common {
    /// TOML run configuration; every field has a default.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set optim.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory, overriding the config.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients of the configured model with finite
    /// differences on one random bag; fails if any block exceeds the
    /// tolerance.
    Gradcheck(Common),
    /// Print per-layer parameter counts and the matching plain network.
    Params(Common),
    /// Train and write log.csv plus initial, best and last checkpoints.
    Train(Common),
    /// Report AUC and accuracy of a checkpoint and write patch heatmaps.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Write the Gabor filters of the configured model as CSV and PGM.
    DumpGabor(Common),
    /// Write train/val/eval manifests of the synthetic data, with images.
    MakeDataset {
        #[command(flatten)]
        common: Common,
        /// Write only the manifests, not the PGM images.
        #[arg(long)]
        manifest_only: bool,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Gradcheck(c) => commands::gradcheck(&c.load()?),
        Command::Params(c) => commands::params(&c.load()?),
        Command::Train(c) => commands::train_cmd(&c.load()?),
        Command::Eval { common, checkpoint } => commands::eval(&common.load()?, &checkpoint),
        Command::DumpGabor(c) => commands::dump_gabor(&c.load()?),
        Command::MakeDataset {
            common,
            manifest_only,
        } => commands::make_dataset(&common.load()?, !manifest_only),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dgfn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
