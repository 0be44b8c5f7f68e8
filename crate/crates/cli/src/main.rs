//! Command-line pipeline for differentially private CATE estimation:
//! generate data, fit the two-stage learner, release estimates (finite or
//! functional), serve iterative queries, run budget sweeps and audits.
//!
//! Exit codes: 0 success, 1 audit/assertion failure, 2 usage error,
//! 3 privacy-budget refusal.

mod commands;
mod common;

use clap::{Parser, Subcommand};
use dpcate::error::Error;

#[derive(Parser, Debug)]
#[command(name = "dpcate", version, about = "Differentially private CATE estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic observational dataset (and optional query files).
    Gen(commands::gen::GenArgs),
    /// Fit private nuisances and the second-stage CATE model.
    Fit(commands::fit::FitArgs),
    /// Release private estimates at a fixed query set.
    Release(commands::release::ReleaseArgs),
    /// Answer iterative queries over stdin/stdout (functional mechanism).
    Serve(commands::serve::ServeArgs),
    /// PEHE sweeps across privacy budgets.
    Sweep(commands::sweep::SweepArgs),
    /// Empirical audits: sensitivity bound, orthogonality slope.
    Audit(commands::audit::AuditArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => commands::gen::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Release(args) => commands::release::run(args),
        Command::Serve(args) => commands::serve::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::Audit(args) => commands::audit::run(args),
    };
    let code = match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::BudgetRefused(_) => 3,
                Error::Argument(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}
