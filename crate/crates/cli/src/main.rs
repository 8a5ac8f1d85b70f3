mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;

/// Sparse supernet search and pruning experiments.
#[derive(Debug, Parser)]
#[command(name = "sparsenas", version)]
struct Cli {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `derive.threshold`.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search the supernet and export the architecture.
    Search,
    /// Run the penalised pruning sweep.
    Prune,
    /// Derive a cell from architecture weights written by `search`.
    Derive {
        /// Architecture weights JSON.
        weights: PathBuf,
    },
    /// Retrain a derived cell and report test accuracy.
    Retrain {
        /// Derived architecture JSON.
        arch: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(t) = cli.threshold {
        cfg.derive.threshold = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Search => run::search(&cfg),
        Command::Prune => run::prune(&cfg),
        Command::Derive { weights } => run::derive(&cfg, weights),
        Command::Retrain { arch } => run::retrain(&cfg, arch),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
