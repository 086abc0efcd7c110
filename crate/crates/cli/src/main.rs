//! `mprnet`: train, evaluate, forecast, probe and ablate from the command line.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 1 for
//! failures while running. Errors print as one line on stderr.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mprnet::data::Split;

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "mprnet", version, about = "Multi-scale pattern reproduction forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset; writes checkpoint, history and resolved config.
    Train(Overrides),
    /// Score a checkpoint; writes a metrics report and per-window forecasts.
    Eval {
        #[command(flatten)]
        flags: Overrides,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Forecast past the end of the dataset with a checkpoint.
    Forecast {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the forward pass while the history length grows.
    Probe {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "96,192,384")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        repeats: usize,
    },
    /// Train and score the full model and the three reduced variants.
    Ablate(Overrides),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(flags) => commands::train_cmd(RunConfig::resolve(&flags, true)?),
        Command::Eval { flags, checkpoint, split } => {
            commands::eval_cmd(RunConfig::resolve(&flags, true)?, checkpoint, split.into())
        }
        Command::Forecast { flags, checkpoint } => commands::forecast_cmd(RunConfig::resolve(&flags, true)?, checkpoint),
        Command::Probe { flags, lengths, repeats } => {
            commands::probe_cmd(RunConfig::resolve(&flags, false)?, &lengths, repeats).map(drop)
        }
        Command::Ablate(flags) => commands::ablate_cmd(RunConfig::resolve(&flags, true)?).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {message}");
            ExitCode::from(e.exit_code())
        }
    }
}
