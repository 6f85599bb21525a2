use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distopt_sim::{execute, Command, Overrides, RunArgs};

#[derive(Parser)]
#[command(
    name = "distopt",
    version,
    about = "Centralized and distributed value approximation runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Load and check a scenario, then print its budget.
    Validate(Args),
    /// Centralized value iteration and closed-loop rollout.
    Centralized(Args),
    /// Distributed value approximation over the neighbor-only bus.
    Distributed(Args),
    /// Both pipelines on one scenario, with deviation monitors.
    Compare(Args),
    /// Check centralized value iteration against the Riccati solution (linear agents).
    OracleLq(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Outer sweeps.
    #[arg(long = "K")]
    sweeps: Option<usize>,
    /// Rounds per sweep.
    #[arg(long = "S")]
    rounds: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Validate(a) => (Command::Validate, a),
        Sub::Centralized(a) => (Command::Centralized, a),
        Sub::Distributed(a) => (Command::Distributed, a),
        Sub::Compare(a) => (Command::Compare, a),
        Sub::OracleLq(a) => (Command::OracleLq, a),
    };
    let args = RunArgs {
        config: args.config,
        out: args.out,
        overrides: Overrides {
            seed: args.seed,
            sweeps: args.sweeps,
            rounds: args.rounds,
        },
    };
    match execute(command, &args) {
        Ok(done) => {
            for line in done.report {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
