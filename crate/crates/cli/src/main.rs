//! `partasm`: generate synthetic data, train, evaluate, assemble single
//! objects and run ablation grids.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "partasm",
    version,
    about = "Sequence-conditioned 3D part assembly"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a 70/10/20 split manifest.
    GenData(commands::GenDataArgs),
    /// Train a model; writes config, checkpoints, history and a test report.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(commands::EvalArgs),
    /// Predict poses for one object and optionally export the assembled shape.
    Assemble(commands::AssembleArgs),
    /// Train and evaluate one sub-run per value along an ablation axis.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Assemble(a) => commands::assemble(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
