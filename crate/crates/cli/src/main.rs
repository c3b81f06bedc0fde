//! `fedmutual` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedmutual::sim::{run_simulation, write_outputs, SimulationConfig};
use fedmutual::StrategyKind;
use log::info;

#[derive(Parser)]
#[command(
    name = "fedmutual",
    version,
    about = "Federated learning protocol simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write its outputs.
    Run {
        /// TOML configuration file.
        config: PathBuf,
        /// Override `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `strategy.kind` (vanilla, async_weights, dml).
        #[arg(long)]
        strategy: Option<StrategyKind>,
        /// Override `run.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-epoch training traces (epochs.csv).
        #[arg(long)]
        verbose: bool,
    },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<SimulationConfig> {
    SimulationConfig::from_file(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => {
            let c = load(&config)?;
            println!(
                "{}: ok ({} clients, {} rounds, {})",
                config.display(),
                c.clients,
                c.rounds,
                c.strategy.kind.name()
            );
        }
        Command::Run {
            config,
            seed,
            strategy,
            out,
            verbose,
        } => {
            let mut c = load(&config)?;
            if let Some(seed) = seed {
                c.seed = seed;
            }
            if let Some(kind) = strategy {
                c.strategy.kind = kind;
            }
            if let Some(out) = out {
                c.output_dir = out;
            }
            c.verbose |= verbose;
            c.validate()?;
            info!(
                "running {} with {} clients for {} rounds (seed {})",
                c.strategy.kind.name(),
                c.clients,
                c.rounds,
                c.seed
            );
            let outcome = run_simulation(&c)?;
            let written = write_outputs(&outcome, &c.output_dir)?;
            for m in &outcome.final_metrics {
                println!(
                    "client {}: {} accuracy {:.4}",
                    m.client, outcome.eval_set, m.accuracy
                );
            }
            println!(
                "{} bytes exchanged; outputs in {} ({} files)",
                outcome.ledger.total(),
                c.output_dir.display(),
                written.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
