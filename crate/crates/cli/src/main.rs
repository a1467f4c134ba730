//! `stochbarrier`: bound sweeps, Monte Carlo experiments and controller
//! comparisons driven by TOML config files.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::RunOptions;
use config::Config;
use error::CliError;

#[derive(Parser)]
#[command(name = "stochbarrier", version, about = "Finite-horizon safety bounds and stochastic safety filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the exit-probability bound over the sweep grid.
    Bound(CommonArgs),
    /// Run Monte Carlo trials for every controller and grid point.
    Simulate(CommonArgs),
    /// Per-step survival fractions for two or more controllers.
    Compare(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `trials.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-step trajectory CSVs.
    #[arg(long)]
    trajectories: bool,
    /// Treat infeasibility as an error and fail on unsound rows.
    #[arg(long)]
    certify: bool,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let (Command::Bound(args) | Command::Simulate(args) | Command::Compare(args)) = &cli.command;
    let opts = RunOptions {
        out_dir: args.out_dir.clone(),
        seed: args.seed,
        trajectories: args.trajectories,
        certify: args.certify,
    };
    let (cfg, dir) = commands::resolve(Config::load(&args.config)?, &opts)?;
    match cli.command {
        Command::Bound(_) => commands::cmd_bound(&cfg, &dir).map(|p| vec![p]),
        Command::Simulate(_) => commands::cmd_simulate(&cfg, &dir, opts.certify),
        Command::Compare(_) => commands::cmd_compare(&cfg, &dir).map(|p| vec![p]),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
