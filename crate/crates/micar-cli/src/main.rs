//! Command-line front end: dataset synthesis, training, caption generation,
//! metric evaluation, attention/routing visualization, and a finite-
//! difference gradient check over the composed model.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod run_config;

#[derive(Parser)]
#[command(name = "micar", version, about = "Train and run a small vision-language captioner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes-and-captions dataset to a directory
    Synth(commands::synth::Args),
    /// Train from a run-config JSON file, writing checkpoints and metrics
    Train(commands::train::Args),
    /// Caption one image or a whole dataset split with beam search
    Generate(commands::generate::Args),
    /// Score a predictions file against a dataset split
    Eval(commands::eval::Args),
    /// Emit attention and routing artifacts for one image/caption pair
    Viz(commands::viz::Args),
    /// Check analytic gradients against central finite differences
    Gradcheck(commands::gradcheck::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Generate(args) => commands::generate::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Viz(args) => commands::viz::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
