use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gep_cli::commands::{accountant, bench, project_error, report, train};

#[derive(Debug, Parser)]
#[command(name = "gep", version, about = "Differentially private training with gradient embedding perturbation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured (method, epsilon, k, m, seed) combination.
    Train(train::TrainArgs),
    /// Noise multiplier for a privacy budget.
    Accountant(accountant::AccountantArgs),
    /// Measured against modelled power-iteration cost.
    Bench(bench::BenchArgs),
    /// Projection error over a (k, m) grid.
    ProjectError(project_error::ProjectErrorArgs),
    /// Summary tables from metrics files.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Train(a) => train::run(a, &mut out).map(drop),
        Command::Accountant(a) => accountant::run(a, &mut out).map(drop),
        Command::Bench(a) => bench::run(a, &mut out).map(drop),
        Command::ProjectError(a) => project_error::run(a, &mut out).map(drop),
        Command::Report(a) => report::run(a, &mut out).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
