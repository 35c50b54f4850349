//! Command-line driver for the hierarchical skill discovery pipeline.
//!
//! `loki run` executes every stage end to end; the per-stage subcommands run
//! one stage against an existing artifact directory, skipping work whose
//! artifacts already match the configuration. Failures exit with a
//! stage-specific code (configuration problems exit 2).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use loki::pipeline::{
    exit_code_for, in_stage, run_pipeline, stage1_segment, stage1_train, stage2_split,
    stage2_train, stage3_train, stage_align, stage_dataset, stage_evaluate, stage_plots,
    stage_refine, stage_rollout, DatasetSource, PipelineConfig, Stage,
};
use loki::{LokiError, Result};

#[derive(Parser)]
#[command(
    name = "loki",
    version,
    about = "Weakly supervised skill discovery and hierarchical policy learning"
)]
struct Cli {
    /// TOML configuration file (defaults to the built-in configuration).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; deterministically re-seeds every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run all stages end to end and print the report path.
    Run,
    /// Generate the synthetic benchmark dataset artifact.
    Generate,
    /// Ingest a dataset file into the artifact store.
    Ingest,
    /// Train the stage-1 quantized auto-encoder.
    Stage1Train,
    /// Detect and tag macro segments from assignment entropy.
    Stage1Segment,
    /// Train the stage-2 windowed sequential auto-encoder.
    Stage2Train,
    /// Propose candidate micro-splits from reconstruction error.
    Stage2Split,
    /// Remove spurious splits by iterative cluster agreement.
    Refine,
    /// Force per-task alignment and assign skill identities.
    Align,
    /// Train the termination model, skill policies and baselines.
    Stage3Train,
    /// Execute the learned programs in the synthetic environment.
    Rollout,
    /// Score segmentation, termination and policies; write the report.
    Evaluate,
    /// Render SVG plots from the CSV exports.
    Plots,
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.apply_master_seed(seed);
    }
    config.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());

    match cli.command {
        Command::Run => {
            let report = run_pipeline(&config, &out)?;
            println!("{}", report.display());
        }
        Command::Generate => {
            if config.dataset.source != DatasetSource::Synthetic {
                return Err(LokiError::Config(
                    "`generate` needs dataset.source = \"synthetic\" (use `ingest` for files)"
                        .into(),
                ));
            }
            in_stage(Stage::Generate, stage_dataset(&config, &out))?;
        }
        Command::Ingest => {
            if config.dataset.source != DatasetSource::File {
                return Err(LokiError::Config(
                    "`ingest` needs dataset.source = \"file\" with a path".into(),
                ));
            }
            in_stage(Stage::Ingest, stage_dataset(&config, &out))?;
        }
        Command::Stage1Train => in_stage(Stage::Stage1Train, stage1_train(&config, &out))?,
        Command::Stage1Segment => in_stage(Stage::Stage1Segment, stage1_segment(&config, &out))?,
        Command::Stage2Train => in_stage(Stage::Stage2Train, stage2_train(&config, &out))?,
        Command::Stage2Split => in_stage(Stage::Stage2Split, stage2_split(&config, &out))?,
        Command::Refine => in_stage(Stage::Refine, stage_refine(&config, &out))?,
        Command::Align => in_stage(Stage::Align, stage_align(&config, &out))?,
        Command::Stage3Train => in_stage(Stage::Stage3Train, stage3_train(&config, &out))?,
        Command::Rollout => in_stage(Stage::Rollout, stage_rollout(&config, &out))?,
        Command::Evaluate => in_stage(Stage::Evaluate, stage_evaluate(&config, &out))?,
        Command::Plots => in_stage(Stage::Plots, stage_plots(&out))?,
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(&cli) {
        eprintln!("error: {error}");
        std::process::exit(exit_code_for(&error));
    }
}
