// Temporary diagnostic: dissect one-step MSE on saved pipeline artifacts.
#![allow(clippy::needless_range_loop)]

use serde::Deserialize;
use std::path::Path;

use loki::dataset::{Dataset, NormStats, Trajectory};
use loki::policy::{bc_pairs, policy_act, GaussianHead, SkillPolicy};
use loki::refine::{LabeledSegment, SkillLibrary};
use loki::one_hot;

#[derive(Deserialize)]
struct Art<T> {
    #[allow(dead_code)]
    config_hash: String,
    #[allow(dead_code)]
    seed: u64,
    payload: T,
}

#[derive(Deserialize)]
struct DatasetPayload {
    trajectories: Vec<Trajectory>,
    stats: NormStats,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

#[derive(Deserialize)]
struct AlignedPayload {
    library: SkillLibrary,
    segments: Vec<LabeledSegment>,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct PoliciesPayload {
    onehot: SkillPolicy,
    embedding: SkillPolicy,
    unconditioned: GaussianHead,
    task_bc: GaussianHead,
}

fn load<T: serde::de::DeserializeOwned>(path: &str) -> T {
    let text = std::fs::read_to_string(path).unwrap();
    let art: Art<T> = serde_json::from_str(&text).unwrap();
    art.payload
}

#[test]
#[ignore]
fn dissect_mse() {
    let run = std::env::var("DBG_RUN").unwrap_or_else(|_| "/tmp/run2".into());
    if !Path::new(&run).exists() {
        eprintln!("no run dir at {run}");
        return;
    }
    let ds: DatasetPayload = load(&format!("{run}/dataset.json"));
    let aligned: AlignedPayload = load(&format!("{run}/aligned.json"));
    let pol: PoliciesPayload = load(&format!("{run}/policies.json"));

    let raw = Dataset::new(ds.trajectories.clone()).unwrap();
    let norm = ds.stats.apply_dataset(&raw);
    let test: std::collections::HashSet<usize> = ds.test_idx.iter().copied().collect();
    let _ = &ds.train_idx;

    let test_segments: Vec<LabeledSegment> = aligned
        .segments
        .iter()
        .filter(|s| test.contains(&s.span.trajectory))
        .cloned()
        .collect();
    let pairs = bc_pairs(&norm, &test_segments).unwrap();
    eprintln!("{} test pairs", pairs.len());

    // Per pair errors for each method.
    let mut rows: Vec<(f64, f64, f64, f64, usize, usize, usize, usize)> = Vec::new();
    for p in &pairs {
        let seg = &test_segments[p.segment];
        let t = {
            // absolute transition index: recover from span offsets
            // pairs are emitted per segment in order; recompute by matching state
            usize::MAX
        };
        let _ = t;
        let e_one = sq(&policy_act(&pol.onehot, &p.state, p.skill).unwrap(), &p.action);
        let e_emb = sq(&policy_act(&pol.embedding, &p.state, p.skill).unwrap(), &p.action);
        let mut x = p.state.clone();
        x.extend(one_hot(p.task, norm.n_tasks));
        let e_task = sq(&pol.task_bc.mean(&x), &p.action);
        let e_unc = sq(&pol.unconditioned.mean(&p.state), &p.action);
        rows.push((e_one, e_emb, e_task, e_unc, p.task, seg.span.trajectory, seg.span.start, p.skill));
    }

    for (mi, name) in ["onehot", "embedding", "task", "uncond"].iter().enumerate() {
        let mut by_task = [(0.0, 0usize); 3];
        for r in &rows {
            let e = [r.0, r.1, r.2, r.3][mi];
            by_task[r.4].0 += e;
            by_task[r.4].1 += 1;
        }
        let line: Vec<String> = by_task
            .iter()
            .map(|(s, n)| format!("{:.4}", s / (*n).max(1) as f64))
            .collect();
        eprintln!("{name}: per-task mse {}", line.join(" "));
    }

    // Top offenders for task-bc.
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[b].2.partial_cmp(&rows[a].2).unwrap());
    eprintln!("top task-bc offenders:");
    for &i in idx.iter().take(15) {
        let r = &rows[i];
        let p = &pairs[i];
        eprintln!(
            "  err={:.3} task={} traj={} seg_start={} skill={} |a|={:.3} flags_on={}",
            r.2,
            r.4,
            r.5,
            r.6,
            r.7,
            p.action.iter().map(|v| v * v).sum::<f64>().sqrt(),
            p.state[2..].iter().filter(|v| v.abs() > 0.5).count()
        );
    }
    // Top offenders for onehot.
    idx.sort_by(|&a, &b| rows[b].0.partial_cmp(&rows[a].0).unwrap());
    eprintln!("top onehot offenders:");
    for &i in idx.iter().take(15) {
        let r = &rows[i];
        let p = &pairs[i];
        eprintln!(
            "  err={:.3} task={} traj={} seg_start={} skill={} |a|={:.3} flags_on={}",
            r.0,
            r.4,
            r.5,
            r.6,
            r.7,
            p.action.iter().map(|v| v * v).sum::<f64>().sqrt(),
            p.state[2..].iter().filter(|v| v.abs() > 0.5).count()
        );
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
#[ignore]
fn retrain_bc_budgets() {
    use loki::policy::{train_bc, train_task_bc, train_unconditioned_bc, BcConfig, ConditioningMode};

    let run = std::env::var("DBG_RUN").unwrap_or_else(|_| "/tmp/run2".into());
    let ds: DatasetPayload = load(&format!("{run}/dataset.json"));
    let aligned: AlignedPayload = load(&format!("{run}/aligned.json"));

    let raw = Dataset::new(ds.trajectories.clone()).unwrap();
    let norm = ds.stats.apply_dataset(&raw);
    let train: std::collections::HashSet<usize> = ds.train_idx.iter().copied().collect();
    let test: std::collections::HashSet<usize> = ds.test_idx.iter().copied().collect();

    let mut train_segments = Vec::new();
    let mut train_embeddings = Vec::new();
    for (seg, emb) in aligned.segments.iter().zip(&aligned.embeddings) {
        if train.contains(&seg.span.trajectory) {
            train_segments.push(seg.clone());
            train_embeddings.push(emb.clone());
        }
    }
    let test_segments: Vec<LabeledSegment> = aligned
        .segments
        .iter()
        .filter(|s| test.contains(&s.span.trajectory))
        .cloned()
        .collect();
    let test_pairs = bc_pairs(&norm, &test_segments).unwrap();

    for (steps, lr) in [(3000usize, 1e-3), (12000, 1e-3), (12000, 3e-3), (24000, 1e-3)] {
        let cfg = BcConfig { steps, learning_rate: lr, ..BcConfig::default() };
        let t0 = std::time::Instant::now();
        let (one, _) = train_bc(
            &norm, &train_segments, &aligned.library, &train_embeddings,
            ConditioningMode::OneHot, &cfg, 1,
        )
        .unwrap();
        let (emb, _) = train_bc(
            &norm, &train_segments, &aligned.library, &train_embeddings,
            ConditioningMode::Embedding, &cfg, 2,
        )
        .unwrap();
        let (unc, _) = train_unconditioned_bc(&norm, &train_segments, &cfg, 3).unwrap();
        let (tsk, _) = train_task_bc(&norm, &train_segments, &cfg, 4).unwrap();

        let mut sums = [0.0f64; 4];
        for p in &test_pairs {
            sums[0] += sq(&policy_act(&one, &p.state, p.skill).unwrap(), &p.action);
            sums[1] += sq(&policy_act(&emb, &p.state, p.skill).unwrap(), &p.action);
            sums[2] += sq(&unc.mean(&p.state), &p.action);
            let mut x = p.state.clone();
            x.extend(one_hot(p.task, norm.n_tasks));
            sums[3] += sq(&tsk.mean(&x), &p.action);
        }
        let n = test_pairs.len() as f64;
        eprintln!(
            "steps={steps} lr={lr}: onehot {:.4} embedding {:.4} uncond {:.4} task {:.4}  ({:.1}s)",
            sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n,
            t0.elapsed().as_secs_f64()
        );
    }
}
