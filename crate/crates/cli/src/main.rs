use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod fit;
mod report;
mod sim;

/// Three-level meta-analysis of standardized mean differences.
#[derive(Debug, Parser)]
#[command(name = "mlmeta", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a dataset and print the analysis.
    Fit {
        /// Long-format CSV with columns cluster,study,n_c,n_t,g[,v2].
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05, value_parser = parse_alpha)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = Method::Both)]
        method: Method,
    },
    /// Run a simulation grid and write the tidy results CSV.
    Simulate {
        /// TOML grid configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, env = "MLMETA_JOBS")]
        jobs: Option<usize>,
        /// Keep complete scenario blocks already in the output file.
        #[arg(long)]
        resume: bool,
    },
    /// Turn simulation results into one CSV per appendix figure.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Appendix letter, A to H.
        #[arg(long)]
        appendix: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Moment,
    Reml,
    Both,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad input: exit 2.
    Input(anyhow::Error),
    /// Numerical failure inside an estimator: exit 3.
    Numeric(anyhow::Error),
}

impl Failure {
    pub fn input(e: impl Into<anyhow::Error>) -> Self {
        Failure::Input(e.into())
    }

    pub fn numeric(e: impl Into<anyhow::Error>) -> Self {
        Failure::Numeric(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit { data, alpha, method } => fit::run(&data, alpha, method),
        Command::Simulate {
            config,
            out,
            jobs,
            resume,
        } => {
            let jobs = jobs
                .filter(|&j| j > 0)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            sim::run(&config, &out, jobs, resume)
        }
        Command::Report {
            input,
            appendix,
            out_dir,
        } => report::run(&input, &appendix, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}
