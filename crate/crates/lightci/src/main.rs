use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lightci::simcmd::{self, SimCommand};
use lightci_core::config::load_config;
use lightci_core::modulator::load_store;

#[derive(Debug, Parser)]
#[command(name = "lightci", version, about = "Lightweight pull-request CI daemon")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the daemon.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Validate a config file and its plugin directory, then exit.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Workload simulator.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve { config } => {
            let config = load_config(&config)?;
            lightci::server::serve(config)
        }
        Command::Check { config: path } => {
            let config = load_config(&path)?;
            let store = load_store(&config.plugins_dir, &config)?;
            println!(
                "{}: ok ({} repositories, {} plugins, max_run_queue {})",
                path.display(),
                config.repositories.len(),
                store.len(),
                config.max_run_queue
            );
            Ok(())
        }
        Command::Sim { command } => simcmd::run(command),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
