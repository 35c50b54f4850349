//! Stage implementations. Every stage reads its inputs from the artifact
//! store, computes, and writes its own artifact back; a stage whose artifact
//! already carries the current config hash is skipped, so re-running the
//! pipeline is a no-op and any prefix of it can be resumed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, load_dataset, normalize, train_test_split, Dataset, NormStats,
    SegmentTag, Trajectory,
};
use crate::evqvae::{
    entropy_trace, macro_segment, train_evqvae, EvqVaeModel, EvqVaeTrainReport,
    MacroSegmentation,
};
use crate::metrics::{
    boundary_f1, export_pca, one_step_mse, termination_accuracy, MsePair, MseRow, MseTable,
};
use crate::policy::{
    bc_pairs, policy_act, skill_timeouts, train_bc, train_task_bc, train_termination,
    train_unconditioned_bc, BcTrainReport, ConditioningMode, GaussianHead, RolloutConfig,
    SkillPolicy, TerminationModel, TerminationTrainReport,
};
use crate::refine::{
    assign_skill_ids, canonical_sequence, force_align, refine_until_converged, LabeledSegment,
    RefineConfig, Segmentation, SkillLibrary, TaskProgram,
};
use crate::seqvae::{
    candidate_splits, curve_diagnostics, embed_segment, extract_windows,
    reconstruction_error_curve, train_seqvae, SegmentSpan, SeqVaeModel, SeqVaeTrainReport,
};
use crate::{one_hot, LokiError, Result};

use super::artifacts::{artifact_matches, files, load_artifact, save_artifact};
use super::config::{DatasetSource, PipelineConfig};

// ---------------------------------------------------------------------------
// Artifact payloads
// ---------------------------------------------------------------------------

/// Demonstrations plus normalization statistics and the fixed train/test
/// trajectory split everything downstream must respect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetArtifact {
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl DatasetArtifact {
    /// Rebuilds the invariant-checked dataset (raw units).
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.trajectories.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Artifact {
    pub model: EvqVaeModel,
    pub report: EvqVaeTrainReport,
}

/// Per-trajectory macro segmentations plus the tag-merged spans: consecutive
/// same-tag segments fused, so each span is one macro segment of the
/// intrinsic/extrinsic alternation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Segments {
    pub segmentations: Vec<MacroSegmentation>,
    pub spans: Vec<Vec<SegmentSpan>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Artifact {
    pub model: SeqVaeModel,
    pub report: SeqVaeTrainReport,
}

/// Candidate micro-splits per trajectory plus the full-length error-curve
/// diagnostics they came from (per-span curves stitched back together).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Segments {
    pub segmentations: Vec<Segmentation>,
    pub curves: Vec<Vec<f64>>,
    pub smoothed: Vec<Vec<f64>>,
    pub d2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinedArtifact {
    pub segmentations: Vec<Segmentation>,
}

/// Force-aligned segmentations with the final skill vocabulary. `segments`
/// and `embeddings` are parallel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignedArtifact {
    pub segmentations: Vec<Segmentation>,
    pub library: SkillLibrary,
    pub segments: Vec<LabeledSegment>,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminationArtifact {
    pub model: TerminationModel,
    pub report: TerminationTrainReport,
}

/// All four action models trained on the train split: the two
/// skill-conditioned policies and the two flat baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoliciesArtifact {
    pub onehot: SkillPolicy,
    pub onehot_report: BcTrainReport,
    pub embedding: SkillPolicy,
    pub embedding_report: BcTrainReport,
    pub unconditioned: GaussianHead,
    pub unconditioned_report: BcTrainReport,
    pub task_bc: GaussianHead,
    pub task_bc_report: BcTrainReport,
}

/// Pooled plus per-trajectory-averaged boundary scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub pooled_precision: f64,
    pub pooled_recall: f64,
    pub pooled_f1: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    /// Macro boundaries vs the tag-change ground truth (synthetic only).
    pub macro_f1: Option<F1Summary>,
    /// Fraction of trajectories whose mean extrinsic-phase entropy is below
    /// the mean intrinsic-phase entropy (synthetic only).
    pub entropy_contract: Option<f64>,
    /// All refined splits vs all interior ground-truth subtask boundaries.
    pub split_f1: Option<F1Summary>,
    /// Held-out termination accuracy at the evaluation tolerance.
    pub termination_accuracy: f64,
    /// Intrinsic cluster purity against generator subtask identities
    /// (synthetic only).
    pub intrinsic_purity: Option<f64>,
    pub mse: MseTable,
    pub programs: Vec<TaskProgram>,
    pub pca_eigenvalues: Vec<f64>,
    pub pca_discarded_variance: f64,
    pub train_count: usize,
    pub test_count: usize,
}

/// One rollout, reduced to what evaluation needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub task: usize,
    pub mode: ConditioningMode,
    pub seed: u64,
    pub steps: usize,
    pub switch_times: Vec<usize>,
    pub subtask_success: Vec<bool>,
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSuccess {
    pub task: usize,
    pub mode: ConditioningMode,
    pub successes: usize,
    pub n: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutsArtifact {
    pub rollouts: Vec<RolloutSummary>,
    pub success_rates: Vec<TaskSuccess>,
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

fn note(stage: &str, message: &str) {
    eprintln!("[{stage}] {message}");
}

fn csv_dir(out: &Path) -> Result<std::path::PathBuf> {
    let dir = out.join(files::CSV_DIR);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Tag-merged macro spans of one trajectory: consecutive same-tag segments
/// fused; span tag = tag of the segment at the span start.
pub fn merged_spans(
    trajectory: usize,
    segmentation: &MacroSegmentation,
    len: usize,
) -> Vec<SegmentSpan> {
    let bounds = segmentation.tag_change_boundaries();
    let mut starts = vec![0usize];
    starts.extend(&bounds);
    starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let end = if i + 1 < starts.len() { starts[i + 1] } else { len };
            let tag = segmentation
                .segments
                .iter()
                .find(|m| m.start <= start && start < m.end)
                .map(|m| m.tag)
                .unwrap_or(SegmentTag::Intrinsic);
            SegmentSpan { trajectory, start, end, tag }
        })
        .collect()
}

fn load_dataset_artifact(out: &Path, hash: &str) -> Result<(DatasetArtifact, Dataset, Dataset)> {
    let artifact = load_artifact::<DatasetArtifact>(out, files::DATASET, hash)?.payload;
    let raw = artifact.dataset()?;
    let normalized = artifact.stats.apply_dataset(&raw);
    Ok((artifact, raw, normalized))
}

// ---------------------------------------------------------------------------
// Dataset stage
// ---------------------------------------------------------------------------

/// Generates or ingests demonstrations, fits normalization statistics and
/// fixes the train/test trajectory split.
pub fn stage_dataset(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::DATASET, &hash, config.seeds.dataset) {
        note("dataset", "artifact up to date, skipping");
        return Ok(());
    }
    let raw = match config.dataset.source {
        DatasetSource::Synthetic => generate_synthetic(
            &config.dataset.spec,
            config.dataset.demos_per_task,
            config.seeds.dataset,
        )?,
        DatasetSource::File => {
            let path = config.dataset.path.as_ref().ok_or_else(|| {
                LokiError::Config("dataset.source = \"file\" needs a path".into())
            })?;
            load_dataset(path)?
        }
    };
    let (_, stats) = normalize(&raw);
    let (train_idx, test_idx) =
        train_test_split(&raw, config.dataset.split_ratio, config.seeds.split);
    note(
        "dataset",
        &format!(
            "{} trajectories ({} train / {} test), {} transitions",
            raw.trajectories.len(),
            train_idx.len(),
            test_idx.len(),
            raw.total_transitions()
        ),
    );
    let artifact = DatasetArtifact { trajectories: raw.trajectories, stats, train_idx, test_idx };
    save_artifact(out, files::DATASET, &hash, config.seeds.dataset, &artifact)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 1: macro segmentation
// ---------------------------------------------------------------------------

pub fn stage1_train(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::STAGE1_MODEL, &hash, config.seeds.stage1) {
        note("stage1-train", "artifact up to date, skipping");
        return Ok(());
    }
    let (_, _, normalized) = load_dataset_artifact(out, &hash)?;
    let (model, report) = train_evqvae(&normalized, &config.stage1.evqvae, config.seeds.stage1)?;
    note(
        "stage1-train",
        &format!(
            "holdout loss {:.6} -> {:.6} over {} steps",
            report.initial_holdout.total, report.final_holdout.total, report.steps
        ),
    );
    save_artifact(
        out,
        files::STAGE1_MODEL,
        &hash,
        config.seeds.stage1,
        &Stage1Artifact { model, report },
    )?;
    Ok(())
}

pub fn stage1_segment(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::STAGE1_SEGMENTS, &hash, config.seeds.stage1) {
        note("stage1-segment", "artifact up to date, skipping");
        return Ok(());
    }
    let (_, _, normalized) = load_dataset_artifact(out, &hash)?;
    let model = load_artifact::<Stage1Artifact>(out, files::STAGE1_MODEL, &hash)?.payload.model;

    let mut segmentations = Vec::with_capacity(normalized.trajectories.len());
    let mut spans = Vec::with_capacity(normalized.trajectories.len());
    for (ti, tr) in normalized.trajectories.iter().enumerate() {
        let trace = entropy_trace(tr, &model);
        let segmentation = macro_segment(&trace, &config.stage1.pelt)?;
        spans.push(merged_spans(ti, &segmentation, tr.len()));
        segmentations.push(segmentation);
    }
    let macro_count: usize = spans.iter().map(|s| s.len()).sum();
    note(
        "stage1-segment",
        &format!("{} macro segments over {} trajectories", macro_count, spans.len()),
    );

    write_entropy_csvs(config, out, &normalized, &model, &segmentations)?;
    save_artifact(
        out,
        files::STAGE1_SEGMENTS,
        &hash,
        config.seeds.stage1,
        &Stage1Segments { segmentations, spans },
    )?;
    Ok(())
}

/// One CSV per task for the task's first trajectory: the entropy trace,
/// per-code probabilities, predicted boundaries and tags.
fn write_entropy_csvs(
    _config: &PipelineConfig,
    out: &Path,
    normalized: &Dataset,
    model: &EvqVaeModel,
    segmentations: &[MacroSegmentation],
) -> Result<()> {
    let dir = csv_dir(out)?;
    for task in 0..normalized.n_tasks {
        let Some((ti, tr)) =
            normalized.trajectories.iter().enumerate().find(|(_, tr)| tr.task == task)
        else {
            continue;
        };
        let trace = entropy_trace(tr, model);
        let segmentation = &segmentations[ti];
        let k = trace.probs.first().map_or(0, |p| p.len());
        let mut text = String::from("t,entropy,log_entropy,boundary,tag");
        for i in 0..k {
            text.push_str(&format!(",p{i}"));
        }
        text.push('\n');
        for t in 0..trace.len() {
            let boundary = usize::from(segmentation.boundaries.contains(&t));
            let tag = segmentation
                .segments
                .iter()
                .find(|m| m.start <= t && t < m.end)
                .map(|m| match m.tag {
                    SegmentTag::Intrinsic => "intrinsic",
                    SegmentTag::Extrinsic => "extrinsic",
                })
                .unwrap_or("intrinsic");
            text.push_str(&format!(
                "{t},{},{},{boundary},{tag}",
                trace.entropy[t], trace.log_entropy[t]
            ));
            for p in &trace.probs[t] {
                text.push_str(&format!(",{p}"));
            }
            text.push('\n');
        }
        std::fs::write(dir.join(format!("entropy_task{task}.csv")), text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 2: micro segmentation
// ---------------------------------------------------------------------------

pub fn stage2_train(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::STAGE2_MODEL, &hash, config.seeds.stage2) {
        note("stage2-train", "artifact up to date, skipping");
        return Ok(());
    }
    let (_, _, normalized) = load_dataset_artifact(out, &hash)?;
    let spans = load_artifact::<Stage1Segments>(out, files::STAGE1_SEGMENTS, &hash)?
        .payload
        .spans;
    let flat: Vec<SegmentSpan> = spans.iter().flatten().copied().collect();
    let windows =
        extract_windows(&normalized, &flat, config.stage2.window, config.stage2.stride)?;
    note("stage2-train", &format!("{} windows from {} macro segments", windows.len(), flat.len()));
    let (model, report) = train_seqvae(&windows, &config.stage2.seqvae, config.seeds.stage2)?;
    note(
        "stage2-train",
        &format!(
            "holdout loss {:.6} -> {:.6} over {} steps",
            report.initial_holdout.total, report.final_holdout.total, report.steps
        ),
    );
    save_artifact(
        out,
        files::STAGE2_MODEL,
        &hash,
        config.seeds.stage2,
        &Stage2Artifact { model, report },
    )?;
    Ok(())
}

pub fn stage2_split(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::STAGE2_SEGMENTS, &hash, config.seeds.stage2) {
        note("stage2-split", "artifact up to date, skipping");
        return Ok(());
    }
    let (_, _, normalized) = load_dataset_artifact(out, &hash)?;
    let spans = load_artifact::<Stage1Segments>(out, files::STAGE1_SEGMENTS, &hash)?
        .payload
        .spans;
    let model = load_artifact::<Stage2Artifact>(out, files::STAGE2_MODEL, &hash)?.payload.model;

    let mut segmentations = Vec::with_capacity(normalized.trajectories.len());
    let mut curves = Vec::with_capacity(normalized.trajectories.len());
    let mut smoothed_all = Vec::with_capacity(normalized.trajectories.len());
    let mut d2_all = Vec::with_capacity(normalized.trajectories.len());
    for (ti, tr) in normalized.trajectories.iter().enumerate() {
        let len = tr.len();
        let mut curve = vec![0.0; len];
        let mut smoothed = vec![0.0; len];
        let mut d2 = vec![0.0; len];
        let mut soft = Vec::new();
        for span in &spans[ti] {
            let span_curve = reconstruction_error_curve(&normalized, span, &model)?;
            let (span_smoothed, span_d2) = curve_diagnostics(&span_curve, &config.stage2.peaks)?;
            curve[span.start..span.end].copy_from_slice(&span_curve);
            smoothed[span.start..span.end].copy_from_slice(&span_smoothed);
            d2[span.start..span.end].copy_from_slice(&span_d2);
            soft.extend(candidate_splits(&span_curve, &config.stage2.peaks, span.start)?);
        }
        let hard: Vec<usize> =
            spans[ti].iter().skip(1).map(|s| s.start).collect();
        segmentations.push(Segmentation::new(ti, tr.task, len, hard, soft)?);
        curves.push(curve);
        smoothed_all.push(smoothed);
        d2_all.push(d2);
    }
    let candidates: usize = segmentations.iter().map(|s| s.soft.len()).sum();
    note("stage2-split", &format!("{candidates} candidate splits"));
    save_artifact(
        out,
        files::STAGE2_SEGMENTS,
        &hash,
        config.seeds.stage2,
        &Stage2Segments { segmentations, curves, smoothed: smoothed_all, d2: d2_all },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Refinement and alignment
// ---------------------------------------------------------------------------

pub fn stage_refine(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::REFINED, &hash, config.seeds.refine) {
        note("refine", "artifact up to date, skipping");
        return Ok(());
    }
    let (_, _, normalized) = load_dataset_artifact(out, &hash)?;
    let spans = load_artifact::<Stage1Segments>(out, files::STAGE1_SEGMENTS, &hash)?
        .payload
        .spans;
    let model = load_artifact::<Stage2Artifact>(out, files::STAGE2_MODEL, &hash)?.payload.model;
    let stage2 = load_artifact::<Stage2Segments>(out, files::STAGE2_SEGMENTS, &hash)?.payload;

    let before: usize = stage2.segmentations.iter().map(|s| s.soft.len()).sum();
    let refined = refine_until_converged(
        &normalized,
        &model,
        stage2.segmentations.clone(),
        &spans,
        &RefineConfig {
            k_seg: config.refine.k_seg,
            r_max: config.refine.r_max,
            seed: config.seeds.refine,
        },
    )?;
    let after: usize = refined.iter().map(|s| s.soft.len()).sum();
    note("refine", &format!("{before} -> {after} splits"));

    write_error_curve_csvs(out, &normalized, &stage2, &refined)?;
    save_artifact(
        out,
        files::REFINED,
        &hash,
        config.seeds.refine,
        &RefinedArtifact { segmentations: refined },
    )?;
    Ok(())
}

/// One CSV per task for the task's first trajectory: the error curve, its
/// diagnostics, and the split sets before and after refinement.
fn write_error_curve_csvs(
    out: &Path,
    normalized: &Dataset,
    stage2: &Stage2Segments,
    refined: &[Segmentation],
) -> Result<()> {
    let dir = csv_dir(out)?;
    for task in 0..normalized.n_tasks {
        let Some((ti, _)) =
            normalized.trajectories.iter().enumerate().find(|(_, tr)| tr.task == task)
        else {
            continue;
        };
        let mut text = String::from("t,error,smoothed,d2,hard,candidate,refined\n");
        let len = stage2.curves[ti].len();
        for t in 0..len {
            let hard = usize::from(stage2.segmentations[ti].hard.contains(&t));
            let cand = usize::from(stage2.segmentations[ti].soft.contains(&t));
            let refd = usize::from(refined[ti].soft.contains(&t));
            text.push_str(&format!(
                "{t},{},{},{},{hard},{cand},{refd}\n",
                stage2.curves[ti][t], stage2.smoothed[ti][t], stage2.d2[ti][t]
            ));
        }
        std::fs::write(dir.join(format!("error_curve_task{task}.csv")), text)?;
    }
    Ok(())
}

pub fn stage_align(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::ALIGNED, &hash, config.seeds.refine) {
        note("align", "artifact up to date, skipping");
        return Ok(());
    }
    let (_, _, normalized) = load_dataset_artifact(out, &hash)?;
    let spans = load_artifact::<Stage1Segments>(out, files::STAGE1_SEGMENTS, &hash)?
        .payload
        .spans;
    let model = load_artifact::<Stage2Artifact>(out, files::STAGE2_MODEL, &hash)?.payload.model;
    let d2 = load_artifact::<Stage2Segments>(out, files::STAGE2_SEGMENTS, &hash)?.payload.d2;
    let mut segmentations =
        load_artifact::<RefinedArtifact>(out, files::REFINED, &hash)?.payload.segmentations;

    // Canonical per-task program length from the refined cluster sequences.
    for seg in &segmentations {
        if seg.labels.len() != seg.segment_count() {
            return Err(LokiError::Alignment(format!(
                "trajectory {} has stale cluster labels; refinement did not converge \
                 within r_max rounds (increase refine.r_max)",
                seg.trajectory
            )));
        }
    }
    let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seg) in segmentations.iter().enumerate() {
        by_task.entry(seg.task).or_default().push(i);
    }
    for (task, members) in &by_task {
        let sequences: Vec<Vec<usize>> =
            members.iter().map(|&i| segmentations[i].labels.clone()).collect();
        let target = canonical_sequence(&sequences)?.len();
        note("align", &format!("task {task}: program length {target}"));
        for &i in members {
            let trajectory = segmentations[i].trajectory;
            force_align(
                &normalized,
                &model,
                &mut segmentations[i],
                target,
                &spans[trajectory],
                &d2[trajectory],
            )?;
        }
    }

    let (library, labeled) = assign_skill_ids(
        &normalized,
        &model,
        &segmentations,
        &spans,
        config.refine.k_int,
        config.seeds.refine,
    )?;

    // Invariant: every trajectory of a task executes the task's program.
    let mut per_traj: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for seg in &labeled {
        per_traj.entry(seg.span.trajectory).or_default().push((seg.position, seg.skill_id));
    }
    for (trajectory, mut skills) in per_traj {
        skills.sort_unstable();
        let sequence: Vec<usize> = skills.into_iter().map(|(_, id)| id).collect();
        let task = normalized.trajectories[trajectory].task;
        let program = library
            .programs
            .iter()
            .find(|p| p.task == task)
            .ok_or_else(|| LokiError::Alignment(format!("no program for task {task}")))?;
        assert_eq!(
            sequence, program.skills,
            "trajectory {trajectory} deviates from the task-{task} program"
        );
    }

    // Final labels on the segmentations: the program skill IDs.
    for seg in &mut segmentations {
        let task = seg.task;
        let program = library.programs.iter().find(|p| p.task == task).unwrap();
        seg.labels = program.skills.clone();
    }

    let embeddings: Vec<Vec<f64>> = labeled
        .iter()
        .map(|seg| embed_segment(&normalized, &seg.span, &model).map(|e| e.mu))
        .collect::<Result<_>>()?;

    note(
        "align",
        &format!("{} skills, {} labeled segments", library.skill_count(), labeled.len()),
    );
    save_artifact(
        out,
        files::ALIGNED,
        &hash,
        config.seeds.refine,
        &AlignedArtifact { segmentations, library, segments: labeled, embeddings },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 3: termination and policies
// ---------------------------------------------------------------------------

pub fn stage3_train(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::TERMINATION, &hash, config.seeds.stage3)
        && artifact_matches(out, files::POLICIES, &hash, config.seeds.stage3)
    {
        note("stage3-train", "artifacts up to date, skipping");
        return Ok(());
    }
    let (artifact, _, normalized) = load_dataset_artifact(out, &hash)?;
    let aligned = load_artifact::<AlignedArtifact>(out, files::ALIGNED, &hash)?.payload;

    let train_set: std::collections::BTreeSet<usize> = artifact.train_idx.iter().copied().collect();
    let mut train_segments = Vec::new();
    let mut train_embeddings = Vec::new();
    for (seg, emb) in aligned.segments.iter().zip(&aligned.embeddings) {
        if train_set.contains(&seg.span.trajectory) {
            train_segments.push(seg.clone());
            train_embeddings.push(emb.clone());
        }
    }
    if train_segments.is_empty() {
        return Err(LokiError::Data("no training segments after the split".into()));
    }

    let seed = config.seeds.stage3;
    let (termination, termination_report) =
        train_termination(&normalized, &train_segments, &config.stage3.termination, seed)?;
    note(
        "stage3-train",
        &format!("termination holdout loss {:.6}", termination_report.final_holdout),
    );
    let (onehot, onehot_report) = train_bc(
        &normalized,
        &train_segments,
        &aligned.library,
        &train_embeddings,
        ConditioningMode::OneHot,
        &config.stage3.bc,
        seed.wrapping_add(1),
    )?;
    let (embedding, embedding_report) = train_bc(
        &normalized,
        &train_segments,
        &aligned.library,
        &train_embeddings,
        ConditioningMode::Embedding,
        &config.stage3.bc,
        seed.wrapping_add(2),
    )?;
    let (unconditioned, unconditioned_report) =
        train_unconditioned_bc(&normalized, &train_segments, &config.stage3.bc, seed.wrapping_add(3))?;
    let (task_bc, task_bc_report) =
        train_task_bc(&normalized, &train_segments, &config.stage3.bc, seed.wrapping_add(4))?;
    note(
        "stage3-train",
        &format!(
            "bc holdout nll: onehot {:.4}, embedding {:.4}, task {:.4}, unconditioned {:.4}",
            onehot_report.final_holdout,
            embedding_report.final_holdout,
            task_bc_report.final_holdout,
            unconditioned_report.final_holdout
        ),
    );

    save_artifact(
        out,
        files::TERMINATION,
        &hash,
        seed,
        &TerminationArtifact { model: termination, report: termination_report },
    )?;
    save_artifact(
        out,
        files::POLICIES,
        &hash,
        seed,
        &PoliciesArtifact {
            onehot,
            onehot_report,
            embedding,
            embedding_report,
            unconditioned,
            unconditioned_report,
            task_bc,
            task_bc_report,
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

pub fn stage_rollout(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::ROLLOUTS, &hash, config.seeds.rollout) {
        note("rollout", "artifact up to date, skipping");
        return Ok(());
    }
    if config.dataset.source != DatasetSource::Synthetic {
        return Err(LokiError::InvalidArgument(
            "rollouts need the synthetic environment (dataset.source = \"synthetic\")".into(),
        ));
    }
    let (artifact, raw, _) = load_dataset_artifact(out, &hash)?;
    let aligned = load_artifact::<AlignedArtifact>(out, files::ALIGNED, &hash)?.payload;
    let termination =
        load_artifact::<TerminationArtifact>(out, files::TERMINATION, &hash)?.payload.model;
    let policies = load_artifact::<PoliciesArtifact>(out, files::POLICIES, &hash)?.payload;

    let timeouts = skill_timeouts(
        &aligned.segments,
        aligned.library.skill_count(),
        config.stage3.timeout_factor,
    )?;
    let rollout_config = RolloutConfig {
        timeouts,
        episode_cap: config.rollout.episode_cap,
        actuation_sigma: config.actuation_sigma(),
    };

    let mut rollouts = Vec::new();
    let mut success_rates = Vec::new();
    for task in 0..raw.n_tasks {
        let program = aligned
            .library
            .programs
            .iter()
            .find(|p| p.task == task)
            .ok_or_else(|| LokiError::Alignment(format!("no program for task {task}")))?;
        let targets = &config.dataset.spec.tasks[task];
        for (mode, policy) in [
            (ConditioningMode::OneHot, &policies.onehot),
            (ConditioningMode::Embedding, &policies.embedding),
        ] {
            let mut successes = 0usize;
            for r in 0..config.rollout.n_rollouts {
                let seed = config
                    .seeds
                    .rollout
                    .wrapping_add((task * config.rollout.n_rollouts + r) as u64);
                let trace = crate::policy::rollout(
                    &config.dataset.spec,
                    &artifact.stats,
                    program,
                    targets,
                    policy,
                    &termination,
                    &rollout_config,
                    seed,
                )?;
                successes += usize::from(trace.success);
                rollouts.push(RolloutSummary {
                    task,
                    mode,
                    seed,
                    steps: trace.actions.len(),
                    switch_times: trace.switch_times,
                    subtask_success: trace.subtask_success,
                    success: trace.success,
                });
            }
            let n = config.rollout.n_rollouts;
            note(
                "rollout",
                &format!("task {task} {mode:?}: {successes}/{n} successes"),
            );
            success_rates.push(TaskSuccess {
                task,
                mode,
                successes,
                n,
                rate: successes as f64 / n as f64,
            });
        }
    }
    save_artifact(
        out,
        files::ROLLOUTS,
        &hash,
        config.seeds.rollout,
        &RolloutsArtifact { rollouts, success_rates },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct PooledF1 {
    tp: usize,
    fp: usize,
    fn_: usize,
    f1s: Vec<f64>,
}

impl PooledF1 {
    fn new() -> Self {
        PooledF1 { tp: 0, fp: 0, fn_: 0, f1s: Vec::new() }
    }

    fn add(&mut self, predicted: &[usize], ground_truth: &[usize], tol: usize) {
        let score = boundary_f1(predicted, ground_truth, tol);
        self.tp += score.matches.len();
        self.fp += predicted.len() - score.matches.len();
        self.fn_ += ground_truth.len() - score.matches.len();
        self.f1s.push(score.f1);
    }

    fn summary(&self) -> F1Summary {
        let precision = if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let f1 =
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let mean_f1 = if self.f1s.is_empty() {
            0.0
        } else {
            self.f1s.iter().sum::<f64>() / self.f1s.len() as f64
        };
        F1Summary { pooled_precision: precision, pooled_recall: recall, pooled_f1: f1, mean_f1 }
    }
}

/// Ground-truth tag of each transition of a trajectory, from the generator's
/// subtask boundaries and the task's fixture tags.
fn gt_transition_tags(
    config: &PipelineConfig,
    tr: &Trajectory,
    gt: &[usize],
) -> Vec<SegmentTag> {
    let tags = config.dataset.spec.subtask_tags(tr.task);
    let mut out = Vec::with_capacity(tr.len());
    let mut j = 0;
    for t in 0..tr.len() {
        while j + 1 < gt.len() && t >= gt[j] {
            j += 1;
        }
        out.push(tags[j.min(tags.len() - 1)]);
    }
    out
}

/// Dominant generator subtask (fixture identity) of a span by overlap.
fn dominant_fixture(
    config: &PipelineConfig,
    tr: &Trajectory,
    gt: &[usize],
    span: &SegmentSpan,
) -> usize {
    let fixtures = &config.dataset.spec.tasks[tr.task];
    let mut best = (0usize, 0usize);
    let mut start = 0usize;
    for (j, &end) in gt.iter().enumerate() {
        let overlap = span.end.min(end).saturating_sub(span.start.max(start));
        if overlap > best.1 {
            best = (fixtures[j.min(fixtures.len() - 1)], overlap);
        }
        start = end;
    }
    best.0
}

pub fn stage_evaluate(config: &PipelineConfig, out: &Path) -> Result<()> {
    let hash = config.hash();
    if artifact_matches(out, files::EVALUATION, &hash, config.seeds.stage3)
        && out.join(files::REPORT).is_file()
    {
        note("evaluate", "artifact up to date, skipping");
        return Ok(());
    }
    let (artifact, raw, normalized) = load_dataset_artifact(out, &hash)?;
    let stage1_model =
        load_artifact::<Stage1Artifact>(out, files::STAGE1_MODEL, &hash)?.payload.model;
    let stage1 = load_artifact::<Stage1Segments>(out, files::STAGE1_SEGMENTS, &hash)?.payload;
    let refined =
        load_artifact::<RefinedArtifact>(out, files::REFINED, &hash)?.payload.segmentations;
    let aligned = load_artifact::<AlignedArtifact>(out, files::ALIGNED, &hash)?.payload;
    let termination =
        load_artifact::<TerminationArtifact>(out, files::TERMINATION, &hash)?.payload.model;
    let policies = load_artifact::<PoliciesArtifact>(out, files::POLICIES, &hash)?.payload;

    let synthetic = config.dataset.source == DatasetSource::Synthetic;
    let tol = config.eval.tol;

    // Stage-1 boundary quality and the entropy contract.
    let mut macro_f1 = PooledF1::new();
    let mut have_macro_gt = false;
    let mut contract_hits = 0usize;
    let mut contract_total = 0usize;
    for (ti, tr) in raw.trajectories.iter().enumerate() {
        let Some(gt) = tr.gt_boundaries.as_ref() else { continue };
        if !synthetic {
            continue;
        }
        have_macro_gt = true;
        let gt_macro = config.dataset.spec.macro_gt_boundaries(tr.task, gt);
        let predicted: Vec<usize> =
            stage1.spans[ti].iter().skip(1).map(|s| s.start).collect();
        macro_f1.add(&predicted, &gt_macro, tol);

        let tags = gt_transition_tags(config, tr, gt);
        let trace = entropy_trace(&normalized.trajectories[ti], &stage1_model);
        let (mut int_sum, mut int_n, mut ext_sum, mut ext_n) = (0.0, 0usize, 0.0, 0usize);
        for (t, tag) in tags.iter().enumerate() {
            match tag {
                SegmentTag::Intrinsic => {
                    int_sum += trace.entropy[t];
                    int_n += 1;
                }
                SegmentTag::Extrinsic => {
                    ext_sum += trace.entropy[t];
                    ext_n += 1;
                }
            }
        }
        if int_n > 0 && ext_n > 0 {
            contract_total += 1;
            if ext_sum / (ext_n as f64) < int_sum / int_n as f64 {
                contract_hits += 1;
            }
        }
    }
    let macro_summary = have_macro_gt.then(|| macro_f1.summary());
    let entropy_contract =
        (contract_total > 0).then(|| contract_hits as f64 / contract_total as f64);

    // Combined splits (hard + refined soft) vs all interior gt boundaries.
    let mut split_f1 = PooledF1::new();
    let mut have_split_gt = false;
    for seg in &refined {
        let tr = &raw.trajectories[seg.trajectory];
        let Some(gt) = tr.gt_boundaries.as_ref() else { continue };
        have_split_gt = true;
        let interior: Vec<usize> =
            gt.iter().copied().filter(|&b| b > 0 && b < seg.len).collect();
        split_f1.add(&seg.combined(), &interior, tol);
    }
    let split_summary = have_split_gt.then(|| split_f1.summary());

    // Held-out termination accuracy.
    let test_set: std::collections::BTreeSet<usize> = artifact.test_idx.iter().copied().collect();
    let test_segments: Vec<LabeledSegment> = aligned
        .segments
        .iter()
        .filter(|s| test_set.contains(&s.span.trajectory))
        .cloned()
        .collect();
    if test_segments.is_empty() {
        return Err(LokiError::Data("no test segments after the split".into()));
    }
    let term_accuracy = termination_accuracy(&termination, &normalized, &test_segments, tol)?;

    // One-step action MSE on the test split, all four methods.
    let pairs: Vec<MsePair> = bc_pairs(&normalized, &test_segments)?
        .into_iter()
        .map(|p| MsePair { task: p.task, skill: Some(p.skill), state: p.state, action: p.action })
        .collect();
    let skill_of = |pair: &MsePair| -> Result<usize> {
        pair.skill.ok_or_else(|| LokiError::InvalidArgument("pair lacks a skill".into()))
    };
    let rows: Vec<MseRow> = vec![
        one_step_mse("loki-onehot", |p| policy_act(&policies.onehot, &p.state, skill_of(p)?), &pairs)?,
        one_step_mse(
            "loki-embedding",
            |p| policy_act(&policies.embedding, &p.state, skill_of(p)?),
            &pairs,
        )?,
        one_step_mse(
            "task-bc",
            |p| {
                let mut x = p.state.clone();
                x.extend(one_hot(p.task, normalized.n_tasks));
                Ok(policies.task_bc.mean(&x))
            },
            &pairs,
        )?,
        one_step_mse("uncond-bc", |p| Ok(policies.unconditioned.mean(&p.state)), &pairs)?,
    ];
    let mse = MseTable { rows };
    mse.validate()?;

    // Intrinsic cluster purity against generator subtask identities.
    let intrinsic_purity = if synthetic {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut total = 0usize;
        for seg in &aligned.segments {
            let Some(cluster) = seg.cluster else { continue };
            let tr = &raw.trajectories[seg.span.trajectory];
            let Some(gt) = tr.gt_boundaries.as_ref() else { continue };
            let fixture = dominant_fixture(config, tr, gt, &seg.span);
            *counts.entry((cluster, fixture)).or_insert(0) += 1;
            total += 1;
        }
        if total == 0 {
            None
        } else {
            let mut per_cluster: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
            for (&(c, f), &n) in &counts {
                *per_cluster.entry(c).or_default().entry(f).or_insert(0) += n;
            }
            let pure: usize =
                per_cluster.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
            Some(pure as f64 / total as f64)
        }
    } else {
        None
    };

    // Embedding PCA export.
    let labels: Vec<usize> = aligned.segments.iter().map(|s| s.skill_id).collect();
    let dir = csv_dir(out)?;
    let pca = export_pca(&aligned.embeddings, &labels, &dir.join("pca.csv"))?;

    write_mse_csv(&dir, &mse)?;
    write_boundaries_csv(config, &dir, &raw, &stage1, &refined)?;

    let evaluation = EvaluationArtifact {
        macro_f1: macro_summary,
        entropy_contract,
        split_f1: split_summary,
        termination_accuracy: term_accuracy,
        intrinsic_purity,
        mse,
        programs: aligned.library.programs.clone(),
        pca_eigenvalues: pca.eigenvalues.clone(),
        pca_discarded_variance: pca.discarded_variance,
        train_count: artifact.train_idx.len(),
        test_count: artifact.test_idx.len(),
    };
    let report = render_report(config, &hash, &raw, &evaluation);
    std::fs::write(out.join(files::REPORT), &report)?;
    save_artifact(out, files::EVALUATION, &hash, config.seeds.stage3, &evaluation)?;
    note("evaluate", &format!("report written ({} bytes)", report.len()));
    Ok(())
}

fn write_mse_csv(dir: &Path, mse: &MseTable) -> Result<()> {
    let mut text = String::from("method,task,mse,std,count\n");
    for row in &mse.rows {
        for task in &row.per_task {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                row.method, task.task, task.mse, task.std, task.count
            ));
        }
        text.push_str(&format!(
            "{},all,{},{},{}\n",
            row.method, row.average_mse, row.average_std, row.count
        ));
    }
    std::fs::write(dir.join("mse.csv"), text)?;
    Ok(())
}

fn write_boundaries_csv(
    config: &PipelineConfig,
    dir: &Path,
    raw: &Dataset,
    stage1: &Stage1Segments,
    refined: &[Segmentation],
) -> Result<()> {
    let join = |v: &[usize]| -> String {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("|")
    };
    let mut text = String::from("trajectory,task,macro_pred,macro_gt,splits,gt_interior\n");
    for (ti, tr) in raw.trajectories.iter().enumerate() {
        let macro_pred: Vec<usize> =
            stage1.spans[ti].iter().skip(1).map(|s| s.start).collect();
        let (macro_gt, gt_interior) = match tr.gt_boundaries.as_ref() {
            Some(gt) if config.dataset.source == DatasetSource::Synthetic => (
                join(&config.dataset.spec.macro_gt_boundaries(tr.task, gt)),
                join(&gt.iter().copied().filter(|&b| b > 0 && b < tr.len()).collect::<Vec<_>>()),
            ),
            Some(gt) => (
                String::new(),
                join(&gt.iter().copied().filter(|&b| b > 0 && b < tr.len()).collect::<Vec<_>>()),
            ),
            None => (String::new(), String::new()),
        };
        text.push_str(&format!(
            "{ti},{},{},{macro_gt},{},{gt_interior}\n",
            tr.task,
            join(&macro_pred),
            join(&refined[ti].combined())
        ));
    }
    std::fs::write(dir.join("boundaries.csv"), text)?;
    Ok(())
}

/// Renders the human-readable run report. Deterministic: fixed layout, fixed
/// float precision, no timestamps or absolute paths.
fn render_report(
    config: &PipelineConfig,
    hash: &str,
    raw: &Dataset,
    evaluation: &EvaluationArtifact,
) -> String {
    let mut s = String::new();
    let mut w = |line: String| {
        s.push_str(&line);
        s.push('\n');
    };
    w("hierarchical skill discovery report".into());
    w("===================================".into());
    w(String::new());
    w(format!("config hash   {hash}"));
    let seeds = &config.seeds;
    w(format!(
        "seeds         dataset={} split={} stage1={} stage2={} refine={} stage3={} rollout={}",
        seeds.dataset, seeds.split, seeds.stage1, seeds.stage2, seeds.refine, seeds.stage3,
        seeds.rollout
    ));
    w(String::new());
    w("dataset".into());
    w(format!("  trajectories        {}", raw.trajectories.len()));
    w(format!("  tasks               {}", raw.n_tasks));
    w(format!("  state dim           {}", raw.state_dim));
    w(format!("  action dim          {}", raw.action_dim));
    w(format!("  transitions         {}", raw.total_transitions()));
    w(format!("  train / test        {} / {}", evaluation.train_count, evaluation.test_count));
    w(String::new());
    w("stage 1: macro segmentation".into());
    match &evaluation.macro_f1 {
        Some(f1) => {
            w(format!("  boundary f1 pooled  {:.6}", f1.pooled_f1));
            w(format!("  boundary f1 mean    {:.6}", f1.mean_f1));
            w(format!("  pooled precision    {:.6}", f1.pooled_precision));
            w(format!("  pooled recall       {:.6}", f1.pooled_recall));
        }
        None => w("  boundary f1         n/a (no ground truth)".into()),
    }
    match evaluation.entropy_contract {
        Some(c) => w(format!("  entropy contract    {c:.6}")),
        None => w("  entropy contract    n/a (no ground truth)".into()),
    }
    w(String::new());
    w("stage 2: micro segmentation".into());
    match &evaluation.split_f1 {
        Some(f1) => {
            w(format!("  split f1 pooled     {:.6}", f1.pooled_f1));
            w(format!("  split f1 mean       {:.6}", f1.mean_f1));
            w(format!("  pooled precision    {:.6}", f1.pooled_precision));
            w(format!("  pooled recall       {:.6}", f1.pooled_recall));
        }
        None => w("  split f1            n/a (no ground truth)".into()),
    }
    match evaluation.intrinsic_purity {
        Some(p) => w(format!("  intrinsic purity    {p:.6}")),
        None => w("  intrinsic purity    n/a".into()),
    }
    w(String::new());
    w("skill programs".into());
    for program in &evaluation.programs {
        let skills: Vec<String> = program.skills.iter().map(|k| k.to_string()).collect();
        w(format!("  task {}: {}", program.task, skills.join(" ")));
    }
    w(String::new());
    w(format!("termination accuracy (tol {})   {:.6}", config.eval.tol, evaluation.termination_accuracy));
    w(String::new());
    w("one-step action mse (test split)".into());
    for line in evaluation.mse.render().lines() {
        w(format!("  {line}"));
    }
    w(String::new());
    w("embedding pca".into());
    for (i, ev) in evaluation.pca_eigenvalues.iter().take(2).enumerate() {
        w(format!("  eigenvalue {}        {ev:.6}", i + 1));
    }
    w(format!("  discarded variance  {:.6}", evaluation.pca_discarded_variance));
    s
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evqvae::MacroSegment;

    fn segmentation(tags: &[(usize, usize, SegmentTag)]) -> MacroSegmentation {
        let segments: Vec<MacroSegment> = tags
            .iter()
            .map(|&(start, end, tag)| MacroSegment { start, end, tag, mean_log_entropy: 0.0 })
            .collect();
        let boundaries = segments.iter().skip(1).map(|m| m.start).collect();
        MacroSegmentation { boundaries, segments, threshold: Some(0.0) }
    }

    #[test]
    fn merged_spans_fuse_same_tag_runs() {
        use SegmentTag::{Extrinsic, Intrinsic};
        let seg = segmentation(&[
            (0, 10, Intrinsic),
            (10, 20, Intrinsic),
            (20, 30, Extrinsic),
            (30, 50, Intrinsic),
        ]);
        let spans = merged_spans(3, &seg, 50);
        assert_eq!(spans.len(), 3);
        assert_eq!(
            spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(),
            vec![(0, 20), (20, 30), (30, 50)]
        );
        assert_eq!(
            spans.iter().map(|s| s.tag).collect::<Vec<_>>(),
            vec![Intrinsic, Extrinsic, Intrinsic]
        );
        assert!(spans.iter().all(|s| s.trajectory == 3));
    }

    #[test]
    fn merged_spans_single_segment_covers_everything() {
        let seg = segmentation(&[(0, 40, SegmentTag::Extrinsic)]);
        let spans = merged_spans(0, &seg, 40);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (0, 40));
        assert_eq!(spans[0].tag, SegmentTag::Extrinsic);
    }

    #[test]
    fn pooled_f1_matches_hand_counts() {
        let mut pooled = PooledF1::new();
        pooled.add(&[10], &[10], 2); // tp 1
        pooled.add(&[5, 20], &[20], 2); // tp 1, fp 1
        pooled.add(&[], &[7], 2); // fn 1
        let s = pooled.summary();
        assert!((s.pooled_precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.pooled_recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.pooled_f1 - 2.0 / 3.0).abs() < 1e-12);
        // mean of [1, 2/3, 0]
        assert!((s.mean_f1 - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gt_tags_follow_subtask_intervals() {
        let config = PipelineConfig::default();
        // Task 0 visits fixtures [0, 3, 1, 2] -> tags [int, ext, int, int].
        let tr = Trajectory {
            task: 0,
            states: vec![vec![0.0; config.dataset.spec.state_dim()]; 9],
            actions: vec![vec![0.0; 2]; 8],
            gt_boundaries: Some(vec![2, 4, 6, 8]),
        };
        let tags = gt_transition_tags(&config, &tr, &[2, 4, 6, 8]);
        use SegmentTag::{Extrinsic, Intrinsic};
        assert_eq!(
            tags,
            vec![
                Intrinsic, Intrinsic, // t = 0, 1 -> subtask 0
                Extrinsic, Extrinsic, // t = 2, 3 -> subtask 1 (fixture 3)
                Intrinsic, Intrinsic, // t = 4, 5
                Intrinsic, Intrinsic, // t = 6, 7
            ]
        );
    }

    #[test]
    fn dominant_fixture_picks_max_overlap() {
        let config = PipelineConfig::default();
        let tr = Trajectory {
            task: 0,
            states: vec![vec![0.0; config.dataset.spec.state_dim()]; 21],
            actions: vec![vec![0.0; 2]; 20],
            gt_boundaries: Some(vec![5, 10, 15, 20]),
        };
        // Span [4, 12): 1 step of subtask 0, 5 of subtask 1, 2 of subtask 2.
        let span =
            SegmentSpan { trajectory: 0, start: 4, end: 12, tag: SegmentTag::Intrinsic };
        // Task 0 fixture order is [0, 3, 1, 2] -> subtask 1 visits fixture 3.
        assert_eq!(dominant_fixture(&config, &tr, &[5, 10, 15, 20], &span), 3);
    }
}
