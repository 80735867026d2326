use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod error;
mod task;

#[derive(Debug, Parser)]
#[command(name = "pfqr", version, about = "Partial functional linear quantile regression")]
struct Cli {
    /// Print progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte-Carlo benchmark and write report.csv, report.txt and plots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (the PFQR_THREADS environment variable takes precedence).
        #[arg(long)]
        threads: Option<usize>,
        /// Master seed, replacing the one in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one model from CSV inputs described by a task file.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict responses for new curves with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        scalars: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render report.txt and plots from report.csv.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Draw one simulated sample and export it as CSV.
    Generate {
        /// Design JSON (`{"kind": "sim1", "n": 100}` or a sim2 design).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            threads,
            seed,
        } => {
            let env = std::env::var("PFQR_THREADS").ok();
            commands::simulate(&config, &out, threads, env.as_deref(), seed, verbose)
        }
        Command::Fit { config, out } => commands::fit(&config, &out, verbose),
        Command::Predict {
            model,
            curves,
            scalars,
            out,
        } => commands::predict(&model, &curves, scalars.as_deref(), &out),
        Command::Report { input } => commands::report(&input),
        Command::Generate { config, out, seed } => commands::generate(&config, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pfqr: {e}");
            ExitCode::from(e.code())
        }
    }
}
