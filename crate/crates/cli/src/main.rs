use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aggfolio::backtest::cmd_backtest;
use aggfolio::config::ExperimentConfig;
use aggfolio::importance::cmd_importance;
use aggfolio::synth::cmd_synth;
use aggfolio::verify::cmd_verify;
use aggfolio::CliError;

/// Online aggregation of expert forecasts into decile long-short portfolios.
#[derive(Parser)]
#[command(name = "aggfolio", version, about)]
struct Cli {
    /// Cap the rayon worker pool (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write series, weights, holdings, stats,
    /// summary, and manifest files.
    Backtest {
        /// Experiment definition (JSON).
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Leave-one-out expert importance table for the configured rule.
    Importance {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Check realized regret against the grid oracle; exit 3 on violation.
    Verify {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Generate the configured synthetic panel (and any synthesizable expert
    /// forecasts) as CSV files.
    Synth {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".to_string()));
        }
        // A second build_global in-process is harmless; the first pool wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config_path = match &cli.command {
        Command::Backtest { config }
        | Command::Importance { config }
        | Command::Verify { config }
        | Command::Synth { config } => config.clone(),
    };
    let cfg = ExperimentConfig::load(&config_path)?;
    match cli.command {
        Command::Backtest { .. } => cmd_backtest(&cfg),
        Command::Importance { .. } => cmd_importance(&cfg),
        Command::Verify { .. } => cmd_verify(&cfg),
        Command::Synth { .. } => cmd_synth(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
