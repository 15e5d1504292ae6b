//! Command line front end for the entropic solver library.
//!
//! Every command reads one JSON configuration file and writes CSV files
//! into the output directory. Outputs are deterministic: the same inputs
//! produce byte-identical files regardless of the thread count.

// Negated comparisons like `!(x > 0)` deliberately catch NaN; indexed loops
// mirror the flat slice arithmetic of the lattice layout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod cmd;
mod config;
mod fail;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::fail::Fail;

#[derive(Parser)]
#[command(name = "entropic", version, about = "Robust utility maximization on jump diffusion lattices", disable_help_subcommand = true)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for CSV outputs.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,

    /// Worker threads; 0 keeps the library default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Seed for the randomized checks.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the penalized problem with both schemes and dump the solutions.
    Solve,
    /// Run the cross-check suite and write oracle_report.csv.
    Verify {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Optimize a consumption and terminal claim plan under the budget.
    OptimalPlan {
        /// Initial capital; overrides the configuration.
        #[arg(long)]
        x: Option<f64>,
        /// "log" or "power:<gamma>"; overrides the configuration.
        #[arg(long)]
        utility: Option<String>,
        /// "dp" or "recursion"; overrides the configuration.
        #[arg(long)]
        scheme: Option<String>,
        /// Fixed point tolerance; overrides the configuration.
        #[arg(long)]
        tol: Option<f64>,
        /// Iteration cap; overrides the configuration.
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Exponential transform of the logarithmic problem at fixed nu.
    LogCase,
    /// Price lattice, risk premia and a buy-and-hold wealth path.
    MarketDemo,
    /// Refinement study across doubling step counts.
    Convergence,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> fail::Result<()> {
    if cli.threads > 0 {
        // A second initialization in the same process is harmless; the pool
        // keeps its first size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let out = cli.out_dir;
    match cli.command {
        Command::Solve => cmd::solve::run(&required(cli.config)?, &out),
        Command::Verify { corrupt } => {
            let cfg = match cli.config {
                Some(path) => config::load(&path)?,
                None => cmd::verify::default_config(),
            };
            cmd::verify::run(&cfg, &out, cli.seed, corrupt)
        }
        Command::OptimalPlan {
            x,
            utility,
            scheme,
            tol,
            max_iter,
        } => cmd::plan::run(
            &required(cli.config)?,
            &out,
            cmd::plan::Overrides {
                x,
                utility,
                scheme,
                tol,
                max_iter,
            },
        ),
        Command::LogCase => cmd::logcase::run(&required(cli.config)?, &out),
        Command::MarketDemo => cmd::market::run(&required(cli.config)?, &out),
        Command::Convergence => cmd::convergence::run(&required(cli.config)?, &out),
    }
}

fn required(path: Option<PathBuf>) -> fail::Result<config::Config> {
    match path {
        Some(p) => config::load(&p),
        None => Err(Fail::config("--config <FILE> is required for this command")),
    }
}
