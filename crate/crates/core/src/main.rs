use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmap::config::load_config;
use fedmap::runner::{self, Grid};
use fedmap::schedule::preview_csv;
use fedmap::FedMapError;

#[derive(Parser)]
#[command(
    name = "fedmap",
    version,
    about = "Federated learning with collaborative magnitude pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the cartesian product of a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Schedule utilities.
    Schedule {
        #[command(subcommand)]
        command: ScheduleCommand,
    },
}

#[derive(Subcommand)]
enum ScheduleCommand {
    /// Print the remaining-parameter series as `t,k_t` CSV.
    Preview {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), FedMapError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let manifest = runner::run(&cfg, &out)?;
            println!(
                "final accuracy {:.4}, {} bytes, config {}",
                manifest.final_accuracy, manifest.cumulative_bytes, manifest.config_hash
            );
        }
        Command::Sweep { config, grid, out } => {
            let cfg = load_config(&config)?;
            let text = std::fs::read_to_string(&grid).map_err(|e| FedMapError::Io {
                path: grid.clone(),
                source: e,
            })?;
            let grid = Grid::parse(&text)?;
            let outcomes = runner::sweep(&cfg, &grid, &out)?;
            let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
            println!("{} cells, {failed} failed", outcomes.len());
        }
        Command::Schedule {
            command: ScheduleCommand::Preview { config },
        } => {
            let cfg = load_config(&config)?;
            print!("{}", preview_csv(&cfg.schedule_spec()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FEDMAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedmap: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
