//! Command-line experiment runner: validates TOML experiment configs, runs
//! them, and writes per-client accuracy metrics as CSV.
//!
//! Exit codes: 0 on success, 2 for configuration problems (including CLI
//! misuse), 1 for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use virtual_fl::harness::{
    emit_metrics, run_experiment, ExperimentConfig, ExperimentOutcome, HarnessError, Method,
};

#[derive(Parser)]
#[command(
    name = "virtual-fl",
    version,
    about = "Federated learning simulator: variational refinement and point-weight baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write metrics.
    Run(RunArgs),
    /// Check a configuration file without running anything.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured method: virtual, fedavg, local, or global.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the metrics CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the dataset label recorded in the metrics CSV.
    #[arg(long)]
    dataset: Option<String>,
    /// Override epochs per refinement, which also scales the epoch budget
    /// granted to the baselines.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override where variational runs store their final state.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// TOML experiment configuration file.
    #[arg(long)]
    config: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Validate(args) => validate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn apply_overrides(config: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(method) = args.method {
        config.method = method;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(reps) = args.reps {
        config.repetitions = reps;
    }
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    if let Some(dataset) = &args.dataset {
        config.dataset_name = Some(dataset.clone());
    }
    if let Some(epochs) = args.epochs {
        config.virtual_cfg.refinement.epochs = epochs;
    }
    if let Some(checkpoint) = &args.checkpoint {
        config.checkpoint = Some(checkpoint.clone());
    }
}

fn run(args: &RunArgs) -> Result<(), HarnessError> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    apply_overrides(&mut config, args);
    config.validate()?;
    let outcome = run_experiment(&config)?;
    report(&config, &outcome);
    if let Some(path) = &config.output {
        emit_metrics(&outcome.records, path)?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

fn report(config: &ExperimentConfig, outcome: &ExperimentOutcome) {
    for (rep, message) in &outcome.failures {
        eprintln!("warning: repetition {rep} failed: {message}");
    }
    for record in &outcome.records {
        println!(
            "  seed {}: accuracy {:.4} ({:.1}s, {:.1} epochs/client)",
            record.seed, record.average, record.seconds, record.epochs
        );
    }
    let s = &outcome.summary;
    println!(
        "{} on {}: mean accuracy {:.4} (std {:.4}) over {} repetition(s), {} failed",
        config.method,
        config.dataset_label(),
        s.mean,
        s.std,
        s.completed,
        s.failed
    );
}

fn validate(args: &ValidateArgs) -> Result<(), HarnessError> {
    let config = ExperimentConfig::from_file(&args.config)?;
    println!(
        "configuration OK: method={}, dataset={}, clients={}, repetitions={}, epoch budget={}",
        config.method,
        config.dataset_label(),
        config.dataset.clients,
        config.repetitions,
        config.virtual_cfg.epoch_budget()
    );
    Ok(())
}
