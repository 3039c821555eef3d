//! `pap` — batch front end for the spectral prompting defense.
//!
//! Five subcommands: `pretrain`, `train-prompts`, `evaluate`,
//! `diagnose-spectra`, `attack`. Each takes a strict TOML config
//! (`--config`) plus optional dotted-path overrides (`--set key=value`)
//! and writes its artifacts into a run directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
//! 4 numeric failure.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "pap",
    version,
    about = "Phase- and amplitude-aware prompting defense toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path config overrides, e.g. --set dataset.seed=7
    /// or --set attacks.0.steps=20. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reference backbone, naturally or adversarially.
    Pretrain(RunArgs),
    /// Optimize a prompt bank against a frozen backbone.
    TrainPrompts(RunArgs),
    /// Measure natural and robust accuracy of a prompted model.
    Evaluate(RunArgs),
    /// Accuracy under the four spectrum-swap conditions.
    DiagnoseSpectra(RunArgs),
    /// Craft an adversarial batch and write it to disk.
    Attack(RunArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(args) => commands::pretrain(&args.config, &args.set),
        Command::TrainPrompts(args) => commands::train_prompts_cmd(&args.config, &args.set),
        Command::Evaluate(args) => commands::evaluate_cmd(&args.config, &args.set),
        Command::DiagnoseSpectra(args) => commands::diagnose_spectra(&args.config, &args.set),
        Command::Attack(args) => commands::attack_cmd(&args.config, &args.set),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(config::exit_code(&err));
    }
}
