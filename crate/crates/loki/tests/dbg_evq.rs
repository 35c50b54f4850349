//! TEMPORARY calibration probe — delete before finalizing.

use loki::changepoint::{Bandwidth, PeltConfig};
use loki::dataset::{generate_synthetic, normalize, SegmentTag, SyntheticKitchenSpec};
use loki::evqvae::{entropy_trace, macro_segment, train_evqvae, EvqVaeConfig};
use std::time::Instant;

fn boundary_counts(pred: &[usize], gt: &[usize], tol: usize) -> (usize, usize, usize) {
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for &p in pred {
        let mut best: Option<(usize, usize)> = None;
        for (j, &g) in gt.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = p.abs_diff(g);
            if d <= tol && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, pred.len() - tp, gt.len() - tp)
}

#[test]
fn freeze_check() {
    let mut spec = SyntheticKitchenSpec::default();
    for &sigma in &[0.0, 0.01] {
        spec.noise_sigma = sigma;
        let raw = generate_synthetic(&spec, 24, 7).unwrap();
        let (ds, _) = normalize(&raw);
        let config = EvqVaeConfig {
            code_dim: 8,
            hidden: vec![32],
            steps: 10000,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup: 300,
            beta_commit: 0.25,
            gamma_div: 0.05,
            holdout: 64,
        };
        let t0 = Instant::now();
        let (model, _) = train_evqvae(&ds, &config, 0).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();

        let pelt = PeltConfig { penalty: 1.0, min_size: 10, bandwidth: Bandwidth::Median };
        let t1 = Instant::now();
        let (mut tp, mut fp, mut fnn) = (0, 0, 0);
        let mut f1_sum = 0.0;
        let mut contract_ok = 0;
        for tr in &ds.trajectories {
            let trace = entropy_trace(tr, &model);
            let seg = macro_segment(&trace, &pelt).unwrap();
            let gt_b = tr.gt_boundaries.as_ref().unwrap();
            let gt = spec.macro_gt_boundaries(tr.task, gt_b);
            let pred = seg.tag_change_boundaries();
            let (a, b, c) = boundary_counts(&pred, &gt, 4);
            tp += a;
            fp += b;
            fnn += c;
            let p = if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
            let r = if a + c == 0 { 0.0 } else { a as f64 / (a + c) as f64 };
            f1_sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };

            // Entropy contract vs gt tags (per transition step).
            let tags = spec.subtask_tags(tr.task);
            let mut bounds = vec![0];
            bounds.extend_from_slice(gt_b);
            bounds.push(tr.len());
            let (mut ext_sum, mut ext_n, mut int_sum, mut int_n) = (0.0, 0, 0.0, 0);
            for (j, w) in bounds.windows(2).enumerate() {
                for t in w[0]..w[1] {
                    match tags[j] {
                        SegmentTag::Extrinsic => {
                            ext_sum += trace.entropy[t];
                            ext_n += 1;
                        }
                        SegmentTag::Intrinsic => {
                            int_sum += trace.entropy[t];
                            int_n += 1;
                        }
                    }
                }
            }
            if ext_sum / (ext_n.max(1) as f64) < int_sum / (int_n.max(1) as f64) {
                contract_ok += 1;
            }
        }
        let seg_secs = t1.elapsed().as_secs_f64();
        let n = ds.trajectories.len();
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fnn) as f64;
        let pooled = 2.0 * p * r / (p + r);
        eprintln!(
            "sigma {sigma}: pooled F1 {pooled:.3}  mean F1 {:.3}  contract {}/{}  train {:.1}s  segment {:.2}s",
            f1_sum / n as f64,
            contract_ok,
            n,
            train_secs,
            seg_secs
        );
    }
}
