//! End-to-end pipeline driver: configuration, artifact store, stage
//! implementations, and the `run_pipeline` orchestrator.

pub mod artifacts;
pub mod config;
pub mod plots;
pub mod stages;

pub use artifacts::{artifact_matches, load_artifact, save_artifact, Artifact};
pub use config::{
    DatasetConfig, DatasetSource, EvalConfig, PipelineConfig, RefineStageConfig,
    RolloutStageConfig, Seeds, Stage1Config, Stage2Config, Stage3Config,
};
pub use plots::stage_plots;
pub use stages::{
    stage1_segment, stage1_train, stage2_split, stage2_train, stage3_train, stage_align,
    stage_dataset, stage_evaluate, stage_refine, stage_rollout, AlignedArtifact, DatasetArtifact,
    EvaluationArtifact, PoliciesArtifact, RefinedArtifact, RolloutsArtifact, Stage1Artifact,
    Stage1Segments, Stage2Artifact, Stage2Segments, TerminationArtifact,
};

use std::path::{Path, PathBuf};

use crate::{LokiError, Result};

/// Pipeline stages in execution order. Each maps to a CLI subcommand and a
/// distinct process exit code so scripted callers can tell failures apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Ingest,
    Stage1Train,
    Stage1Segment,
    Stage2Train,
    Stage2Split,
    Refine,
    Align,
    Stage3Train,
    Rollout,
    Evaluate,
    Plots,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Ingest => "ingest",
            Stage::Stage1Train => "stage1-train",
            Stage::Stage1Segment => "stage1-segment",
            Stage::Stage2Train => "stage2-train",
            Stage::Stage2Split => "stage2-split",
            Stage::Refine => "refine",
            Stage::Align => "align",
            Stage::Stage3Train => "stage3-train",
            Stage::Rollout => "rollout",
            Stage::Evaluate => "evaluate",
            Stage::Plots => "plots",
        }
    }

    /// Process exit code when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Generate => 10,
            Stage::Ingest => 11,
            Stage::Stage1Train => 12,
            Stage::Stage1Segment => 13,
            Stage::Stage2Train => 14,
            Stage::Stage2Split => 15,
            Stage::Refine => 16,
            Stage::Align => 17,
            Stage::Stage3Train => 18,
            Stage::Rollout => 19,
            Stage::Evaluate => 20,
            Stage::Plots => 21,
        }
    }
}

/// Wraps a stage body so failures carry the stage name and exit code.
pub fn in_stage<T>(stage: Stage, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        already @ LokiError::Stage { .. } => already,
        other => LokiError::Stage { stage: stage.as_str().to_string(), source: Box::new(other) },
    })
}

/// Runs the full discovery pipeline into `out`: dataset, both macro stages,
/// both micro stages, refinement, alignment, policy training and evaluation.
/// Returns the report path. Stages whose artifacts already match the config
/// are skipped, so the call is idempotent and resumable; rollouts and plots
/// are separate commands layered on the finished artifacts.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let resolved = toml::to_string_pretty(config)
        .map_err(|e| LokiError::Config(format!("config does not serialize: {e}")))?;
    std::fs::write(out.join("config.toml"), resolved)?;

    let dataset_stage = match config.dataset.source {
        DatasetSource::Synthetic => Stage::Generate,
        DatasetSource::File => Stage::Ingest,
    };
    in_stage(dataset_stage, stage_dataset(config, out))?;
    in_stage(Stage::Stage1Train, stage1_train(config, out))?;
    in_stage(Stage::Stage1Segment, stage1_segment(config, out))?;
    in_stage(Stage::Stage2Train, stage2_train(config, out))?;
    in_stage(Stage::Stage2Split, stage2_split(config, out))?;
    in_stage(Stage::Refine, stage_refine(config, out))?;
    in_stage(Stage::Align, stage_align(config, out))?;
    in_stage(Stage::Stage3Train, stage3_train(config, out))?;
    in_stage(Stage::Evaluate, stage_evaluate(config, out))?;
    Ok(out.join(artifacts::files::REPORT))
}

/// Maps an error to the process exit code: stage failures use the stage's
/// code, everything else (config/validation problems) exits 2.
pub fn exit_code_for(error: &LokiError) -> i32 {
    if let LokiError::Stage { stage, .. } = error {
        for s in [
            Stage::Generate,
            Stage::Ingest,
            Stage::Stage1Train,
            Stage::Stage1Segment,
            Stage::Stage2Train,
            Stage::Stage2Split,
            Stage::Refine,
            Stage::Align,
            Stage::Stage3Train,
            Stage::Rollout,
            Stage::Evaluate,
            Stage::Plots,
        ] {
            if s.as_str() == stage {
                return s.exit_code();
            }
        }
    }
    2
}
