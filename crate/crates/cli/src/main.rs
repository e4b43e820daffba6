//! `pi2i`: batch front end for indexing, sampling, training and evaluation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::PipelineConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pi2i", version, about = "Personalized item-to-item retrieval pipeline")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the item-to-item index and save the vocabularies.
    BuildIndex,
    /// Dump training samples drawn from the index.
    Sample,
    /// Train the scoring network and write a checkpoint.
    Train,
    /// Hit rate at every K in `ks`.
    Evaluate,
    /// Top-K lists for every evaluation user.
    Retrieve,
    /// Candidate-pool and top-K hit rate across `sweep_grid` truncations.
    Sweep,
    /// Which history position the hits come from.
    Stats,
    /// Print the resolved config in canonical form.
    ShowConfig,
}

fn key_help() -> String {
    format!("Config keys and defaults:\n\n{}", PipelineConfig::default().to_text())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    pool.build_global().map_err(|e| CliError::Usage(e.to_string()))?;

    match cli.command {
        Command::BuildIndex => commands::build_index(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::Train => commands::train_model(&cfg),
        Command::Evaluate => commands::evaluate_model(&cfg),
        Command::Retrieve => commands::retrieve(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = key_help();
    let command = Cli::command().mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
