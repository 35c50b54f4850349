//! Stage-2 refinement — iterative split-point consolidation by clustering,
//! canonical task sequences, force-alignment, and final skill-ID assignment.
//!
//! Candidate splits from the error curves over-segment; clustering all
//! segment embeddings and removing soft splits between same-cluster
//! neighbors consolidates them. Macro (hard) splits are never removed. Each
//! task is then reduced to one canonical label sequence, every trajectory is
//! force-aligned to it, and segments receive final skill IDs: intrinsic
//! segments share K_int clustered IDs, extrinsic segments get one ID per
//! (task, program position).

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SegmentTag};
use crate::rng::chacha;
use crate::seqvae::{embed_segment, SegmentSpan, SeqVaeModel};
use crate::{LokiError, Result};
use rand::RngExt;

// ---------------------------------------------------------------------------
// Segmentations
// ---------------------------------------------------------------------------

/// Split structure of one trajectory: immutable hard (macro) splits plus
/// removable soft (stage-2 candidate) splits, with per-segment cluster
/// labels once clustering has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub trajectory: usize,
    pub task: usize,
    /// Trajectory length in transitions (the exclusive end of the last segment).
    pub len: usize,
    /// Interior macro split indices, strictly ascending in (0, len).
    pub hard: Vec<usize>,
    /// Interior candidate split indices, disjoint from `hard`.
    pub soft: Vec<usize>,
    /// Per-segment cluster labels, parallel to `segments()`; empty until a
    /// clustering pass has run.
    pub labels: Vec<usize>,
}

impl Segmentation {
    pub fn new(
        trajectory: usize,
        task: usize,
        len: usize,
        hard: Vec<usize>,
        soft: Vec<usize>,
    ) -> Result<Segmentation> {
        let seg = Segmentation { trajectory, task, len, hard, soft, labels: Vec::new() };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(LokiError::InvalidArgument("empty trajectory in segmentation".into()));
        }
        let ascending_interior = |splits: &[usize]| {
            splits.windows(2).all(|w| w[0] < w[1])
                && splits.iter().all(|&s| s > 0 && s < self.len)
        };
        if !ascending_interior(&self.hard) || !ascending_interior(&self.soft) {
            return Err(LokiError::InvalidArgument(format!(
                "splits must be strictly ascending in (0, {})",
                self.len
            )));
        }
        if self.soft.iter().any(|s| self.hard.binary_search(s).is_ok()) {
            return Err(LokiError::InvalidArgument("soft split duplicates a hard split".into()));
        }
        if !self.labels.is_empty() && self.labels.len() != self.segment_count() {
            return Err(LokiError::InvalidArgument(format!(
                "{} labels for {} segments",
                self.labels.len(),
                self.segment_count()
            )));
        }
        Ok(())
    }

    /// All interior splits, hard and soft merged, ascending.
    pub fn combined(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.hard.iter().chain(&self.soft).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn segment_count(&self) -> usize {
        self.hard.len() + self.soft.len() + 1
    }

    /// Segment spans `[start, end)` induced by the combined splits.
    pub fn segment_bounds(&self) -> Vec<(usize, usize)> {
        let mut bounds = Vec::with_capacity(self.segment_count());
        let mut prev = 0;
        for s in self.combined() {
            bounds.push((prev, s));
            prev = s;
        }
        bounds.push((prev, self.len));
        bounds
    }

    /// Segment spans with tags inherited from the enclosing macro segment.
    /// `macro_spans` are this trajectory's stage-1 segments; every micro
    /// segment must lie inside exactly one of them (hard splits are the
    /// macro boundaries).
    pub fn tagged_spans(&self, macro_spans: &[SegmentSpan]) -> Result<Vec<SegmentSpan>> {
        self.segment_bounds()
            .into_iter()
            .map(|(start, end)| {
                let parent = macro_spans
                    .iter()
                    .find(|m| start >= m.start && end <= m.end)
                    .ok_or_else(|| LokiError::InvalidArgument(format!(
                        "segment [{start}, {end}) crosses macro boundaries"
                    )))?;
                Ok(SegmentSpan {
                    trajectory: self.trajectory,
                    start,
                    end,
                    tag: parent.tag,
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with farthest-point seeding. Deterministic given the
/// seed: the first centroid is a seeded random point, each further centroid
/// the point farthest from its nearest chosen centroid (ties to the smaller
/// index). Empty clusters are re-seeded from the point farthest from its
/// assigned centroid. Returns (assignments, centroids, per-iteration inertia).
fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let n = points.len();
    let mut rng = chacha(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    while centroids.len() < k {
        let (mut best_i, mut best_d) = (0, -1.0);
        for (i, p) in points.iter().enumerate() {
            let d = centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best_i = i;
            }
        }
        centroids.push(points[best_i].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = (0usize, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect()
    };

    let mut assignments = assign(&centroids);
    let mut inertia_curve = Vec::new();
    for _ in 0..100 {
        // Update step.
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for d in 0..dim {
                sums[a][d] += p[d];
            }
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed from the point farthest from its assigned centroid.
                let (mut far_i, mut far_d) = (0, -1.0);
                for (i, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[assignments[i]]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centroids[j] = points[far_i].clone();
            } else {
                for d in 0..dim {
                    centroids[j][d] = sums[j][d] / counts[j] as f64;
                }
            }
        }
        let next = assign(&centroids);
        let inertia: f64 = points
            .iter()
            .zip(&next)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        inertia_curve.push(inertia);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    (assignments, centroids, inertia_curve)
}

/// Deterministic k-means over embedding vectors.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if k == 0 {
        return Err(LokiError::InvalidArgument("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(LokiError::InvalidArgument(format!(
            "{} points cannot fill {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(LokiError::InvalidArgument("points must share a nonzero dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LokiError::InvalidArgument("non-finite point in k-means input".into()));
    }
    let (assignments, centroids, _) = lloyd(points, k, seed);
    Ok((assignments, centroids))
}

// ---------------------------------------------------------------------------
// Iterative refinement
// ---------------------------------------------------------------------------

/// One clustering-and-removal pass. `embeddings` must hold one embedding per
/// segment, ordered as the segmentations' segments are enumerated. Every
/// soft split whose two adjacent segments land in the same cluster is
/// removed; hard splits are never touched. Labels are stored on each
/// segmentation. Returns whether any split was removed.
pub fn refine_iteration(
    segmentations: &mut [Segmentation],
    embeddings: &[Vec<f64>],
    k_seg: usize,
    seed: u64,
) -> Result<bool> {
    let total: usize = segmentations.iter().map(|s| s.segment_count()).sum();
    if embeddings.len() != total {
        return Err(LokiError::InvalidArgument(format!(
            "{} embeddings for {total} segments",
            embeddings.len()
        )));
    }
    let k = k_seg.min(embeddings.len());
    let (assignments, _) = kmeans(embeddings, k, seed)?;

    let mut changed = false;
    let mut offset = 0;
    for seg in segmentations.iter_mut() {
        let count = seg.segment_count();
        let labels = &assignments[offset..offset + count];
        offset += count;
        // Map each soft split to its adjacent segment pair via the combined
        // ascending order, then drop same-cluster pairs.
        let combined = seg.combined();
        let keep: Vec<usize> = seg
            .soft
            .iter()
            .copied()
            .filter(|s| {
                let i = combined.binary_search(s).expect("soft split present in combined");
                let same = labels[i] == labels[i + 1];
                if same {
                    changed = true;
                }
                !same
            })
            .collect();
        seg.soft = keep;
        // Labels correspond to the pre-removal segments; refresh them on the
        // new structure next round. Store the surviving structure's labels
        // only when nothing changed (they are then current).
        seg.labels = if seg.segment_count() == count { labels.to_vec() } else { Vec::new() };
    }
    Ok(changed)
}

/// Refinement loop configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Clustering size for refinement rounds.
    pub k_seg: usize,
    /// Maximum refinement rounds.
    pub r_max: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { k_seg: 6, r_max: 10, seed: 0 }
    }
}

fn embed_all(
    dataset: &Dataset,
    model: &SeqVaeModel,
    segmentations: &[Segmentation],
    macro_spans: &[Vec<SegmentSpan>],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for seg in segmentations {
        for span in seg.tagged_spans(&macro_spans[seg.trajectory])? {
            out.push(embed_segment(dataset, &span, model)?.mu);
        }
    }
    Ok(out)
}

/// Re-embed → cluster → remove, until no split is removed or `r_max` rounds.
/// The split count is non-increasing by construction and asserted. The final
/// pass leaves every segmentation with current labels.
pub fn refine_until_converged(
    dataset: &Dataset,
    model: &SeqVaeModel,
    mut segmentations: Vec<Segmentation>,
    macro_spans: &[Vec<SegmentSpan>],
    config: &RefineConfig,
) -> Result<Vec<Segmentation>> {
    if config.k_seg == 0 || config.r_max == 0 {
        return Err(LokiError::Config("k_seg and r_max must be >= 1".into()));
    }
    let mut splits_before: usize = segmentations.iter().map(|s| s.soft.len()).sum();
    for _ in 0..config.r_max {
        let embeddings = embed_all(dataset, model, &segmentations, macro_spans)?;
        let changed = refine_iteration(&mut segmentations, &embeddings, config.k_seg, config.seed)?;
        let splits_after: usize = segmentations.iter().map(|s| s.soft.len()).sum();
        assert!(splits_after <= splits_before, "refinement must not add splits");
        splits_before = splits_after;
        if !changed {
            return Ok(segmentations);
        }
    }
    // r_max rounds of removal ran; one final pass refreshes the labels.
    let embeddings = embed_all(dataset, model, &segmentations, macro_spans)?;
    refine_iteration(&mut segmentations, &embeddings, config.k_seg, config.seed)?;
    Ok(segmentations)
}

// ---------------------------------------------------------------------------
// Canonical sequences and alignment
// ---------------------------------------------------------------------------

/// Classic edit distance between label sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            row.push(sub.min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

/// The modal label sequence of one task's trajectories. Frequency ties break
/// toward the sequence with minimal summed edit distance to all sequences,
/// then lexicographically.
pub fn canonical_sequence(sequences: &[Vec<usize>]) -> Result<Vec<usize>> {
    if sequences.is_empty() {
        return Err(LokiError::InvalidArgument("no sequences to canonicalize".into()));
    }
    let mut candidates: Vec<&Vec<usize>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for s in sequences {
        match candidates.iter().position(|c| *c == s) {
            Some(i) => counts[i] += 1,
            None => {
                candidates.push(s);
                counts.push(1);
            }
        }
    }
    let max_count = *counts.iter().max().unwrap();
    let mut best: Option<(&Vec<usize>, usize)> = None;
    for (c, &count) in candidates.iter().zip(&counts) {
        if count != max_count {
            continue;
        }
        let total: usize = sequences.iter().map(|s| levenshtein(c, s)).sum();
        best = match best {
            None => Some((c, total)),
            Some((bc, bt)) => {
                if total < bt || (total == bt && c.as_slice() < bc.as_slice()) {
                    Some((c, total))
                } else {
                    Some((bc, bt))
                }
            }
        };
    }
    Ok(best.unwrap().0.clone())
}

/// Forces one segmentation to exactly `target_len` segments: merges the
/// soft split with the closest adjacent-segment embeddings while too long,
/// splits the longest segment at its maximum second-derivative error point
/// while too short. `curve_d2` is the per-timestep second derivative of the
/// trajectory's reconstruction-error curve. Labels are cleared; the caller
/// assigns them positionally from the task program.
pub fn force_align(
    dataset: &Dataset,
    model: &SeqVaeModel,
    seg: &mut Segmentation,
    target_len: usize,
    macro_spans: &[SegmentSpan],
    curve_d2: &[f64],
) -> Result<()> {
    if target_len == 0 {
        return Err(LokiError::InvalidArgument("target program length must be >= 1".into()));
    }
    if curve_d2.len() != seg.len {
        return Err(LokiError::InvalidArgument(format!(
            "second-derivative curve length {} != trajectory length {}",
            curve_d2.len(),
            seg.len
        )));
    }
    while seg.segment_count() > target_len {
        if seg.soft.is_empty() {
            return Err(LokiError::Alignment(format!(
                "trajectory {}: {} hard segments exceed program length {target_len}",
                seg.trajectory,
                seg.segment_count()
            )));
        }
        let spans = seg.tagged_spans(macro_spans)?;
        let embeddings: Vec<Vec<f64>> = spans
            .iter()
            .map(|span| embed_segment(dataset, span, model).map(|e| e.mu))
            .collect::<Result<_>>()?;
        let combined = seg.combined();
        let (mut best_split, mut best_d) = (None, f64::INFINITY);
        for &s in &seg.soft {
            let i = combined.binary_search(&s).expect("soft split in combined");
            let d = sq_dist(&embeddings[i], &embeddings[i + 1]);
            if d < best_d {
                best_d = d;
                best_split = Some(s);
            }
        }
        let victim = best_split.unwrap();
        seg.soft.retain(|&s| s != victim);
    }
    while seg.segment_count() < target_len {
        let bounds = seg.segment_bounds();
        let (start, end) = bounds
            .iter()
            .copied()
            .max_by(|a, b| (a.1 - a.0).cmp(&(b.1 - b.0)))
            .unwrap();
        if end - start < 2 {
            return Err(LokiError::Alignment(format!(
                "trajectory {}: cannot split further to reach program length {target_len}",
                seg.trajectory
            )));
        }
        // Interior candidate with the largest d²; ties to the earliest.
        let split = (start + 1..end)
            .max_by(|&a, &b| curve_d2[a].partial_cmp(&curve_d2[b]).unwrap())
            .unwrap();
        let pos = seg.soft.partition_point(|&s| s < split);
        seg.soft.insert(pos, split);
    }
    seg.labels = Vec::new();
    Ok(())
}

// ---------------------------------------------------------------------------
// Skill IDs
// ---------------------------------------------------------------------------

/// Final skill vocabulary: K_int clustered intrinsic IDs, then one extrinsic
/// ID per (task, program position), with per-ID centroids for
/// embedding-conditioned policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillLibrary {
    pub k_int: usize,
    /// Centroid per skill ID; intrinsic IDs first, then extrinsic.
    pub centroids: Vec<Vec<f64>>,
    /// (task, program position) behind each extrinsic ID, parallel to
    /// `centroids[k_int..]`.
    pub extrinsic_keys: Vec<(usize, usize)>,
    pub programs: Vec<TaskProgram>,
}

impl SkillLibrary {
    pub fn skill_count(&self) -> usize {
        self.centroids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.len() != self.k_int + self.extrinsic_keys.len() {
            return Err(LokiError::InvalidArgument(
                "centroid count != k_int + extrinsic keys".into(),
            ));
        }
        for program in &self.programs {
            if program.skills.is_empty() {
                return Err(LokiError::InvalidArgument(format!(
                    "task {} has an empty program",
                    program.task
                )));
            }
            if program.skills.iter().any(|&id| id >= self.skill_count()) {
                return Err(LokiError::InvalidArgument(format!(
                    "task {} program references an unknown skill",
                    program.task
                )));
            }
        }
        Ok(())
    }
}

/// One task's canonical skill-ID sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProgram {
    pub task: usize,
    pub skills: Vec<usize>,
}

/// One aligned segment with its final skill ID. `cluster` keeps the raw
/// intrinsic k-means assignment for purity evaluation (None for extrinsic
/// segments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub span: SegmentSpan,
    pub task: usize,
    /// Position in the task program.
    pub position: usize,
    pub skill_id: usize,
    pub cluster: Option<usize>,
}

/// Assigns final skill IDs to force-aligned segmentations. All trajectories
/// of a task must already share one segment count (the program length).
/// Each (task, position) slot is tagged by majority vote over its segments
/// — a force-aligned deviant inherits the slot's canonical tag (ties toward
/// intrinsic). Intrinsic slots get the modal k-means cluster of their
/// segments across trajectories; extrinsic slots get fresh IDs ≥ K_int keyed
/// by (task, position).
pub fn assign_skill_ids(
    dataset: &Dataset,
    model: &SeqVaeModel,
    segmentations: &[Segmentation],
    macro_spans: &[Vec<SegmentSpan>],
    k_int: usize,
    seed: u64,
) -> Result<(SkillLibrary, Vec<LabeledSegment>)> {
    if segmentations.is_empty() {
        return Err(LokiError::InvalidArgument("no segmentations to label".into()));
    }
    // Collect spans and embeddings per segment, noting tags.
    struct Item {
        task: usize,
        position: usize,
        span: SegmentSpan,
        embedding: Vec<f64>,
        seg_index: usize,
    }
    let mut items: Vec<Item> = Vec::new();
    let mut program_len = vec![None::<usize>; dataset.n_tasks];
    for (si, seg) in segmentations.iter().enumerate() {
        let spans = seg.tagged_spans(&macro_spans[seg.trajectory])?;
        match program_len[seg.task] {
            None => program_len[seg.task] = Some(spans.len()),
            Some(p) if p == spans.len() => {}
            Some(p) => {
                return Err(LokiError::Alignment(format!(
                    "task {} trajectories disagree on segment count ({p} vs {})",
                    seg.task,
                    spans.len()
                )))
            }
        }
        for (position, span) in spans.into_iter().enumerate() {
            let embedding = embed_segment(dataset, &span, model)?.mu;
            items.push(Item { task: seg.task, position, span, embedding, seg_index: si });
        }
    }
    // Slot tags by majority vote: stage-1 occasionally flips a tag on a
    // noisy trajectory, and force-alignment projects such deviants onto the
    // task's canonical structure — so the slot, not the individual segment,
    // carries the authoritative tag.
    let mut slot_votes: std::collections::BTreeMap<(usize, usize), (usize, usize)> =
        std::collections::BTreeMap::new();
    for item in &items {
        let entry = slot_votes.entry((item.task, item.position)).or_insert((0, 0));
        match item.span.tag {
            SegmentTag::Intrinsic => entry.0 += 1,
            SegmentTag::Extrinsic => entry.1 += 1,
        }
    }
    let slot_tags: std::collections::BTreeMap<(usize, usize), SegmentTag> = slot_votes
        .into_iter()
        .map(|(key, (intrinsic, extrinsic))| {
            let tag =
                if intrinsic >= extrinsic { SegmentTag::Intrinsic } else { SegmentTag::Extrinsic };
            (key, tag)
        })
        .collect();

    // Cluster the segments sitting in intrinsic slots.
    let intrinsic_idx: Vec<usize> = (0..items.len())
        .filter(|&i| slot_tags[&(items[i].task, items[i].position)] == SegmentTag::Intrinsic)
        .collect();
    if intrinsic_idx.len() < k_int {
        return Err(LokiError::InvalidArgument(format!(
            "K_int {k_int} exceeds the {} intrinsic segments",
            intrinsic_idx.len()
        )));
    }
    let intrinsic_points: Vec<Vec<f64>> =
        intrinsic_idx.iter().map(|&i| items[i].embedding.clone()).collect();
    let (assignments, centroids) = kmeans(&intrinsic_points, k_int, seed)?;
    let mut cluster_of: Vec<Option<usize>> = vec![None; items.len()];
    for (&i, &a) in intrinsic_idx.iter().zip(&assignments) {
        cluster_of[i] = Some(a);
    }

    // Intrinsic slots: modal cluster across the task's trajectories
    // (ties to the smaller cluster ID). Extrinsic slots: fresh IDs in
    // (task, position) order.
    let mut slot_ids: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    let mut extrinsic_keys: Vec<(usize, usize)> = Vec::new();
    let mut extrinsic_members: Vec<Vec<&Vec<f64>>> = Vec::new();
    for (&(task, position), &tag) in &slot_tags {
        if tag == SegmentTag::Intrinsic {
            let mut votes = vec![0usize; k_int];
            for (i, item) in items.iter().enumerate() {
                if item.task == task && item.position == position {
                    votes[cluster_of[i].unwrap()] += 1;
                }
            }
            let modal = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            slot_ids.insert((task, position), modal);
        } else {
            let id = k_int + extrinsic_keys.len();
            extrinsic_keys.push((task, position));
            let members: Vec<&Vec<f64>> = items
                .iter()
                .filter(|i| i.task == task && i.position == position)
                .map(|i| &i.embedding)
                .collect();
            extrinsic_members.push(members);
            slot_ids.insert((task, position), id);
        }
    }

    // Per-ID centroids: intrinsic from k-means, extrinsic as member means.
    let dim = centroids[0].len();
    let mut all_centroids = centroids;
    for members in &extrinsic_members {
        let mut mean = vec![0.0; dim];
        for m in members {
            for d in 0..dim {
                mean[d] += m[d];
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        all_centroids.push(mean);
    }

    let programs: Vec<TaskProgram> = (0..dataset.n_tasks)
        .filter_map(|task| {
            let len = program_len[task]?;
            Some(TaskProgram {
                task,
                skills: (0..len).map(|p| slot_ids[&(task, p)]).collect(),
            })
        })
        .collect();

    let mut labeled: Vec<LabeledSegment> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        labeled.push(LabeledSegment {
            span: item.span,
            task: item.task,
            position: item.position,
            skill_id: slot_ids[&(item.task, item.position)],
            cluster: cluster_of[i],
        });
    }
    // Write final labels back onto the segmentations.
    let mut by_seg: Vec<Vec<usize>> = vec![Vec::new(); segmentations.len()];
    for (item, lab) in items.iter().zip(&labeled) {
        by_seg[item.seg_index].push(lab.skill_id);
    }
    let library = SkillLibrary {
        k_int,
        centroids: all_centroids,
        extrinsic_keys,
        programs,
    };
    library.validate()?;
    debug_assert_eq!(by_seg.len(), segmentations.len());
    Ok((library, labeled))
}
