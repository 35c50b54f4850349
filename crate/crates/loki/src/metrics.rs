//! Evaluation — boundary-quality scores, one-step action MSE tables,
//! termination accuracy, and latent-space PCA export.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::policy::{termination_predict, TerminationModel};
use crate::refine::LabeledSegment;
use crate::{LokiError, Result};

// ---------------------------------------------------------------------------
// Boundary matching
// ---------------------------------------------------------------------------

/// Precision/recall/F1 of predicted boundaries against ground truth at a
/// step tolerance, with the matched pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tol: usize,
    /// Matched (predicted, ground-truth) boundary values, ascending.
    pub matches: Vec<(usize, usize)>,
}

/// Scores predicted boundaries against ground truth: one-to-one matching
/// within `tol`, maximizing the number of matched pairs (ties broken toward
/// the smallest total step distance). On well-separated lists this coincides
/// with nearest-neighbor matching; unlike a scan-order greedy it is exactly
/// symmetric, so swapping the lists swaps precision and recall.
///
/// Both lists must be strictly ascending (panics otherwise).
pub fn boundary_f1(predicted: &[usize], ground_truth: &[usize], tol: usize) -> BoundaryScore {
    assert!(
        predicted.windows(2).all(|w| w[0] < w[1]),
        "predicted boundaries must be strictly ascending"
    );
    assert!(
        ground_truth.windows(2).all(|w| w[0] < w[1]),
        "ground-truth boundaries must be strictly ascending"
    );
    let n = predicted.len();
    let m = ground_truth.len();

    // Non-crossing maximum matching via sequence alignment. For points on a
    // line any crossing match can be uncrossed without leaving the tolerance,
    // so restricting to non-crossing matchings loses nothing.
    // dp[i][j] = (matches, total distance) for predicted[..i] vs gt[..j];
    // maximize matches, then minimize distance.
    let better = |a: (usize, usize), b: (usize, usize)| -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    };
    let mut dp = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let mut best = dp[i - 1][j];
            if better(dp[i][j - 1], best) {
                best = dp[i][j - 1];
            }
            let d = predicted[i - 1].abs_diff(ground_truth[j - 1]);
            if d <= tol {
                let cand = (dp[i - 1][j - 1].0 + 1, dp[i - 1][j - 1].1 + d);
                if better(cand, best) {
                    best = cand;
                }
            }
            dp[i][j] = best;
        }
    }

    let mut matches = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let d = predicted[i - 1].abs_diff(ground_truth[j - 1]);
        if d <= tol && dp[i][j] == (dp[i - 1][j - 1].0 + 1, dp[i - 1][j - 1].1 + d) {
            matches.push((predicted[i - 1], ground_truth[j - 1]));
            i -= 1;
            j -= 1;
        } else if dp[i][j] == dp[i - 1][j] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    matches.reverse();

    let tp = matches.len();
    let precision = if n == 0 { 1.0 } else { tp as f64 / n as f64 };
    let recall = if m == 0 { 1.0 } else { tp as f64 / m as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BoundaryScore { precision, recall, f1, tol, matches }
}

// ---------------------------------------------------------------------------
// One-step action MSE
// ---------------------------------------------------------------------------

/// One held-out evaluation pair: the demonstrated action at a state, with the
/// task and (for skill-conditioned methods) the discovered skill active at
/// that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsePair {
    pub task: usize,
    pub skill: Option<usize>,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

/// Per-task MSE summary for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMse {
    pub task: usize,
    pub mse: f64,
    pub std: f64,
    pub count: usize,
}

/// One method row of the MSE table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub method: String,
    pub per_task: Vec<TaskMse>,
    pub average_mse: f64,
    pub average_std: f64,
    pub count: usize,
}

impl MseRow {
    /// The pooled average must be the count-weighted mean of the per-task
    /// entries.
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.per_task.iter().map(|t| t.count).sum();
        if total != self.count {
            return Err(LokiError::InvalidArgument("per-task counts do not sum to total".into()));
        }
        let weighted: f64 =
            self.per_task.iter().map(|t| t.mse * t.count as f64).sum::<f64>() / total as f64;
        if (weighted - self.average_mse).abs() > 1e-9 * weighted.abs().max(1.0) {
            return Err(LokiError::InvalidArgument(
                "average MSE inconsistent with per-task entries".into(),
            ));
        }
        Ok(())
    }
}

/// Per-method one-step MSE table (Table-style report).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MseTable {
    pub rows: Vec<MseRow>,
}

impl MseTable {
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            row.validate()?;
        }
        Ok(())
    }

    /// Fixed-layout text rendering; deterministic for identical values.
    pub fn render(&self) -> String {
        let mut tasks: Vec<usize> = Vec::new();
        for row in &self.rows {
            for t in &row.per_task {
                if !tasks.contains(&t.task) {
                    tasks.push(t.task);
                }
            }
        }
        tasks.sort_unstable();
        let mut out = String::new();
        out.push_str(&format!("{:<18}", "method"));
        for t in &tasks {
            out.push_str(&format!("{:>22}", format!("task {t}")));
        }
        out.push_str(&format!("{:>22}\n", "average"));
        for row in &self.rows {
            out.push_str(&format!("{:<18}", row.method));
            for t in &tasks {
                match row.per_task.iter().find(|x| x.task == *t) {
                    Some(x) => {
                        out.push_str(&format!("{:>22}", format!("{:.6} ± {:.6}", x.mse, x.std)))
                    }
                    None => out.push_str(&format!("{:>22}", "-")),
                }
            }
            out.push_str(&format!(
                "{:>22}\n",
                format!("{:.6} ± {:.6}", row.average_mse, row.average_std)
            ));
        }
        out
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One-step action MSE of a predictor on held-out pairs, per task ± std plus
/// the pooled average. The per-pair error is the squared error averaged over
/// action dimensions.
pub fn one_step_mse<F>(method: &str, mut predict: F, pairs: &[MsePair]) -> Result<MseRow>
where
    F: FnMut(&MsePair) -> Result<Vec<f64>>,
{
    if pairs.is_empty() {
        return Err(LokiError::InvalidArgument("empty test split".into()));
    }
    let mut by_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pred = predict(pair)?;
        if pred.len() != pair.action.len() {
            return Err(LokiError::InvalidArgument(format!(
                "predictor returned {} dims for a {}-dim action",
                pred.len(),
                pair.action.len()
            )));
        }
        let e = pred
            .iter()
            .zip(&pair.action)
            .map(|(p, a)| (p - a) * (p - a))
            .sum::<f64>()
            / pair.action.len() as f64;
        by_task.entry(pair.task).or_default().push(e);
        all.push(e);
    }
    let per_task = by_task
        .into_iter()
        .map(|(task, errors)| {
            let (mse, std) = mean_and_std(&errors);
            TaskMse { task, mse, std, count: errors.len() }
        })
        .collect();
    let (average_mse, average_std) = mean_and_std(&all);
    let row = MseRow {
        method: method.to_string(),
        per_task,
        average_mse,
        average_std,
        count: all.len(),
    };
    row.validate()?;
    Ok(row)
}

// ---------------------------------------------------------------------------
// Termination accuracy
// ---------------------------------------------------------------------------

/// Fraction of segments whose first termination-threshold crossing lies
/// within ±tol steps of the segment end. The scan starts at the segment's
/// first produced state and extends tol steps past the end (it must see a
/// late crossing to credit it); no crossing counts as incorrect.
pub fn termination_accuracy_with<F>(
    predict: F,
    theta: f64,
    dataset: &Dataset,
    segments: &[LabeledSegment],
    tol: usize,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if segments.is_empty() {
        return Err(LokiError::InvalidArgument("no segments to evaluate".into()));
    }
    let mut correct = 0usize;
    for seg in segments {
        let span = &seg.span;
        let tr = dataset
            .trajectories
            .get(span.trajectory)
            .ok_or_else(|| LokiError::InvalidArgument(format!(
                "segment references trajectory {}",
                span.trajectory
            )))?;
        if span.start >= span.end || span.end > tr.len() {
            return Err(LokiError::InvalidArgument(format!(
                "segment [{}, {}) out of bounds for trajectory {} of length {}",
                span.start,
                span.end,
                span.trajectory,
                tr.len()
            )));
        }
        let stop = (span.end + tol).min(tr.len());
        let crossing = (span.start + 1..=stop).find(|&t| predict(&tr.states[t]) > theta);
        if let Some(t) = crossing {
            if t + tol >= span.end && t <= span.end + tol {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / segments.len() as f64)
}

/// [`termination_accuracy_with`] driven by a trained termination model.
pub fn termination_accuracy(
    model: &TerminationModel,
    dataset: &Dataset,
    segments: &[LabeledSegment],
    tol: usize,
) -> Result<f64> {
    termination_accuracy_with(
        |s| termination_predict(model, s),
        model.theta_term,
        dataset,
        segments,
        tol,
    )
}

// ---------------------------------------------------------------------------
// PCA export
// ---------------------------------------------------------------------------

/// Two-component PCA of skill embeddings, with per-label centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaExport {
    /// Per-input (pc1, pc2) coordinates, in input order.
    pub coords: Vec<[f64; 2]>,
    /// The two principal axes (unit vectors in embedding space).
    pub components: [Vec<f64>; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Sum of the eigenvalues beyond the first two — the mean squared
    /// reconstruction error of the 2-component projection.
    pub discarded_variance: f64,
    /// True when the second component carries (numerically) no variance.
    pub rank_deficient: bool,
    /// Per-label mean coordinates, ascending label.
    pub centroids: Vec<(usize, [f64; 2])>,
}

/// Jacobi eigendecomposition of a symmetric matrix: eigenvalues and
/// column eigenvectors, unsorted.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off <= 1e-28 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let apq = a[p][q];
                let (app, aqq) = (a[p][p], a[q][q]);
                a[p][p] = app - t * apq;
                a[q][q] = aqq + t * apq;
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for k in 0..d {
                    if k != p && k != q {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[p][k] = a[k][p];
                        a[k][q] = s * akp + c * akq;
                        a[q][k] = a[k][q];
                    }
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Principal-component analysis of labeled embeddings; top-2 coordinates,
/// labels and per-label centroids written as CSV.
///
/// The axes come from an exact eigendecomposition of the population
/// covariance; each axis's largest-magnitude loading is made positive, so
/// the output is deterministic. Trivially low-rank data yields a zero
/// second coordinate and sets `rank_deficient`.
pub fn export_pca(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    path: &Path,
) -> Result<PcaExport> {
    if embeddings.len() < 2 {
        return Err(LokiError::InvalidArgument("PCA needs at least 2 embeddings".into()));
    }
    if labels.len() != embeddings.len() {
        return Err(LokiError::InvalidArgument("one label per embedding required".into()));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(LokiError::InvalidArgument(
            "embeddings must share one nonzero dimension".into(),
        ));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LokiError::InvalidArgument("embeddings must be finite".into()));
    }
    let n = embeddings.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for e in embeddings {
        for i in 0..d {
            let ci = e[i] - mean[i];
            for j in i..d {
                cov[i][j] += ci * (e[j] - mean[j]) / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }

    let (raw_vals, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| raw_vals[j].partial_cmp(&raw_vals[i]).unwrap().then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| raw_vals[i].max(0.0)).collect();

    let component = |rank: usize| -> Vec<f64> {
        if rank >= d {
            return vec![0.0; d];
        }
        let col = order[rank];
        let mut u: Vec<f64> = (0..d).map(|k| vecs[k][col]).collect();
        let lead = (0..d)
            .max_by(|&i, &j| {
                u[i].abs().partial_cmp(&u[j].abs()).unwrap().then(j.cmp(&i))
            })
            .unwrap();
        if u[lead] < 0.0 {
            for x in u.iter_mut() {
                *x = -*x;
            }
        }
        u
    };
    let components = [component(0), component(1)];

    let coords: Vec<[f64; 2]> = embeddings
        .iter()
        .map(|e| {
            let mut c = [0.0; 2];
            for (axis, comp) in components.iter().enumerate() {
                c[axis] = e.iter().zip(comp).zip(&mean).map(|((x, u), m)| (x - m) * u).sum();
            }
            c
        })
        .collect();

    let lambda1 = eigenvalues.first().copied().unwrap_or(0.0);
    let lambda2 = eigenvalues.get(1).copied().unwrap_or(0.0);
    let rank_deficient = lambda2 <= 1e-12 * lambda1.max(1e-300) || lambda1 == 0.0 || d < 2;
    let discarded_variance = eigenvalues.iter().skip(2).sum();

    let mut by_label: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (c, &l) in coords.iter().zip(labels) {
        let e = by_label.entry(l).or_insert((0.0, 0.0, 0));
        e.0 += c[0];
        e.1 += c[1];
        e.2 += 1;
    }
    let centroids: Vec<(usize, [f64; 2])> = by_label
        .into_iter()
        .map(|(l, (sx, sy, k))| (l, [sx / k as f64, sy / k as f64]))
        .collect();

    let mut file = std::fs::File::create(path)?;
    writeln!(file, "kind,label,pc1,pc2")?;
    for (c, &l) in coords.iter().zip(labels) {
        writeln!(file, "point,{},{},{}", l, c[0], c[1])?;
    }
    for (l, c) in &centroids {
        writeln!(file, "centroid,{},{},{}", l, c[0], c[1])?;
    }

    Ok(PcaExport {
        coords,
        components,
        eigenvalues,
        discarded_variance,
        rank_deficient,
        centroids,
    })
}

// ---------------------------------------------------------------------------
