//! `drnm` — deterministic experiments for anchor-guided world-model rollout
//! with bidirectional epipolar attention masks on a synthetic pinhole world.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use drnm_cli::config::ExperimentConfig;
use drnm_cli::experiment::{
    metrics_csv, run_experiment, stage_ablate, stage_masks, stage_plan, stage_rollout,
    stage_simulate, write_manifest, StageSink,
};
use drnm_cli::parallel::thread_cap;
use drnm_cli::report::emit_report;

#[derive(Parser)]
#[command(
    name = "drnm",
    about = "Drift-resistant rollout experiments on a synthetic pinhole world",
    version
)]
struct Cli {
    /// Experiment configuration file (key = value with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic scene and nominal trajectory.
    Simulate,
    /// Construct bidirectional epipolar masks for the first chunk.
    Masks,
    /// Run the AR vs anchor-guided drift sweep.
    Rollout,
    /// Run the component-toggle ablation matrix.
    Ablate,
    /// Plan toward a goal image with CEM under both strategies.
    Plan,
    /// Aggregate an artifact directory into a summary with pass/fail flags.
    Report,
    /// Run every stage (simulate, masks, rollout, ablate, plan).
    Run,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<drnm_cli::experiment::RunError> for CliError {
    fn from(e: drnm_cli::experiment::RunError) -> Self {
        CliError::Runtime(e.0)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| CliError::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = thread_cap().map_err(CliError::Config)?;

    if matches!(cli.command, Command::Report) {
        let summary = emit_report(&cli.out)?;
        print!("{}", summary.table);
        if summary.flags.iter().any(|f| !f.pass) {
            return Err(CliError::Runtime("one or more report checks failed".into()));
        }
        return Ok(());
    }

    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Run => {
            let files = run_experiment(&cfg, &cli.out, workers)?;
            println!("wrote {} files to {}", files.len(), cli.out.display());
        }
        Command::Simulate | Command::Masks | Command::Rollout | Command::Ablate
        | Command::Plan => {
            let mut sink = StageSink::new(&cli.out)?;
            match cli.command {
                Command::Simulate => stage_simulate(&cfg, &mut sink)?,
                Command::Masks => stage_masks(&cfg, &mut sink)?,
                Command::Rollout => stage_rollout(&cfg, workers, &mut sink)?,
                Command::Ablate => stage_ablate(&cfg, workers, &mut sink)?,
                Command::Plan => stage_plan(&cfg, &mut sink)?,
                _ => unreachable!(),
            }
            if !sink.metrics.is_empty() {
                let metrics = metrics_csv(&sink.metrics);
                sink.write("metrics.csv", metrics.as_bytes())?;
            }
            write_manifest(&cfg, &mut sink)?;
            println!("wrote {} files to {}", sink.files.len(), cli.out.display());
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
