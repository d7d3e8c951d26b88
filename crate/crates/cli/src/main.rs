use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmlo_cli::{commands, EXIT_USAGE};

/// Event-triggered model-based RL experiments.
#[derive(Parser)]
#[command(name = "cmlo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the bound campaigns of a config's [verify_bounds] section.
    VerifyBounds { config: PathBuf },
    /// Run the configured mode once per seed.
    Run { config: PathBuf },
    /// Run the trigger and every fixed ablation interval, then report.
    AblateTrigger { config: PathBuf },
    /// Aggregate run directories into summary.csv and stages.csv.
    Report {
        /// Episodes averaged into the final return.
        #[arg(long, default_value_t = 10)]
        final_episodes: usize,
        /// Write CSVs here instead of printing the summary.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::VerifyBounds { config } => commands::verify_bounds(config),
        Command::Run { config } => commands::run(config),
        Command::AblateTrigger { config } => commands::ablate_trigger(config),
        Command::Report {
            final_episodes,
            out,
            run_dirs,
        } => commands::report(run_dirs, *final_episodes, out.as_deref()),
    };
    match result {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
