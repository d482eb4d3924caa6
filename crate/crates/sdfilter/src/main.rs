use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdfilter::commands::{cmd_bands, cmd_experiment, cmd_filter, cmd_fit, cmd_simulate, cmd_smooth, Invocation};
use sdfilter::error::{CliError, CliResult};

/// Score-driven filtering and smoothing of state-space models.
#[derive(Debug, Parser)]
#[command(name = "sdfilter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for experiments (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a series from the configured model.
    Simulate,
    /// Fit the configured model by maximum likelihood.
    Fit,
    /// Score-driven filter at the fitted parameters.
    Filter,
    /// Score-driven smoother at the fitted parameters.
    Smooth,
    /// Confidence bands at the fitted parameters.
    Bands,
    /// Monte Carlo comparison against the particle reference.
    Experiment,
}

fn run(cli: &Cli) -> CliResult<String> {
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config is required"))?;
    let inv = Invocation::load(config, &cli.out, cli.seed)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&inv),
        Command::Fit => cmd_fit(&inv),
        Command::Filter => cmd_filter(&inv),
        Command::Smooth => cmd_smooth(&inv),
        Command::Bands => cmd_bands(&inv),
        Command::Experiment => {
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = cli.threads {
                if n == 0 {
                    return Err(CliError::config("--threads must be at least 1"));
                }
                pool = pool.num_threads(n);
            }
            let pool = pool
                .build()
                .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
            pool.install(|| cmd_experiment(&inv))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
