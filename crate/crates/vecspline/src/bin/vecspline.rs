use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vecspline::problem::{
    apply_overrides, cmd_check, cmd_compare, cmd_greens, cmd_solve, default_out_dir,
    exit_code_for, load_problem, EXIT_OK,
};

/// Causal Green's matrices, adaptive vector splines, and TV-regularized
/// inverse problems for matrix differential operators.
#[derive(Parser)]
#[command(name = "vecspline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize and verify the causal Green's matrix of the operator.
    Greens(CommonArgs),
    /// Simulate (or load) data and solve the regularized problem.
    Solve(CommonArgs),
    /// Run the sparse and the quadratic solver on identical data.
    Compare(CommonArgs),
    /// Admissibility, injectivity, controllability, and Q-rank report.
    Check(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Problem description (JSON).
    problem: PathBuf,
    /// Output directory (default: `out` next to the problem file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the knot-grid step, keeping the span.
    #[arg(long)]
    grid_step: Option<f64>,
}

fn run(args: &CommonArgs, f: impl FnOnce(&vecspline::problem::ProblemFile, &std::path::Path) -> vecspline::error::Result<i32>) -> i32 {
    let mut problem = match load_problem(&args.problem) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    apply_overrides(&mut problem, args.seed, args.grid_step);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_out_dir(&args.problem));
    match f(&problem, &out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Greens(a) => run(a, |p, out| cmd_greens(p, out).map(|_| EXIT_OK)),
        Command::Solve(a) => run(a, cmd_solve),
        Command::Compare(a) => run(a, cmd_compare),
        Command::Check(a) => run(a, |p, out| cmd_check(p, out).map(|_| EXIT_OK)),
    };
    ExitCode::from(code as u8)
}
