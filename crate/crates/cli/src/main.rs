mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Context, Suite};
use config::RunConfig;
use error::CliError;

/// Fairness-penalized single- and multi-task training.
#[derive(Debug, Parser)]
#[command(name = "fairtransfer", version)]
struct Cli {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Parallel trials for `grid` and `benchmark`.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Resolve and validate the config, print what would run, do nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Config override as a dotted path, e.g. `train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic task pair as JSONL files.
    Synth,
    /// Train and evaluate one configuration.
    Train,
    /// Run a hyperparameter grid.
    Grid,
    /// Select one trial of a grid.
    Select,
    /// Tabulate selected trials across methods.
    Report,
    /// Run a pinned benchmark suite with its controls.
    Benchmark {
        suite: Suite,
        /// Seeds 0..N.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let ctx = Context {
        config,
        out: cli.out,
        workers: cli.workers,
        dry_run: cli.dry_run,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Grid => commands::grid(&ctx),
        Command::Select => commands::select(&ctx),
        Command::Report => commands::report(&ctx),
        Command::Benchmark { suite, seeds } => commands::benchmark(&ctx, suite, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return CliError::Usage(e.render().to_string().trim().to_string()).exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.exit(),
    }
}
