use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pile_cli::commands::{run, Command};
use pile_cli::config::load_config;
use pile_core::optimality::CheckMode;

/// Simulate granular piles, optimize their support and check optimality.
#[derive(Parser)]
#[command(name = "pile", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `check.mode`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    PaperLiteral,
    DerivedConsistent,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(m) = cli.mode {
        cfg.check.mode = match m {
            Mode::PaperLiteral => CheckMode::PaperLiteral,
            Mode::DerivedConsistent => CheckMode::DerivedConsistent,
        };
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match run(cli.command, &cfg, &cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
