//! `fedmeta run <config.json> [--seed N] [--out DIR]`
//! `fedmeta cost <config.json>`
//!
//! Exit codes: 0 ok, 2 config error, 3 runtime error.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fedmeta", version, about = "Meta-knowledge federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method and write one CSV ledger per method.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the communication cost of the configured run without training.
    Cost { config: PathBuf },
}

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (Command::Run { config, .. } | Command::Cost { config }) = &cli.command;
    let spec = match config::parse_config(config) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let result = match cli.command {
        Command::Run { seed, out, .. } => {
            let spec = match seed {
                Some(s) => spec.with_seed(s),
                None => spec,
            };
            let out = out.unwrap_or_else(|| spec.output_dir.clone());
            run::run(&spec, &out).map(|results| {
                print!("{}", run::summary(&spec.config_hash(), &results));
            })
        }
        Command::Cost { .. } => run::cost_table(&spec).map(|table| print!("{table}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}
