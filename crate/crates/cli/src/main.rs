use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use memrouter::config::RunConfig;
use memrouter::run::{run, Command};

/// Nearest-neighbor routing memory for a toy MoE transformer.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    command: Command,
    /// JSON run config; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override applied after loading, e.g. `retrieval.K=3`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Sets the data, init and shuffle seeds at once.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = memrouter::configure_threads()
        .and_then(|_| RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed))
        .and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
