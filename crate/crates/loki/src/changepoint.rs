//! Penalized kernel change-point detection and curve utilities.
//!
//! [`pelt`] minimizes total within-segment RBF-kernel scatter plus a per-change
//! penalty with pruned dynamic programming; [`brute_force_segment`] minimizes
//! the identical objective by exhaustive enumeration and exists as an
//! independent oracle for short series. [`smooth`] and
//! [`second_derivative_peaks`] support the reconstruction-error curve
//! analysis.

use serde::{Deserialize, Serialize};

use crate::{LokiError, Result};

/// A 1-D real sequence.
pub type Series = Vec<f64>;

/// Bandwidth policy for the RBF kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median of pairwise absolute differences over at most 512 evenly
    /// spaced points, floored at 1e-6.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeltConfig {
    /// Cost added per change point. Must be positive and finite.
    pub penalty: f64,
    /// Minimum segment length in samples.
    pub min_size: usize,
    pub bandwidth: Bandwidth,
}

impl PeltConfig {
    /// BIC-style default for a series of length `t_len`: penalty 3·ln T,
    /// min_size 10, median-heuristic bandwidth.
    pub fn bic_default(t_len: usize) -> Self {
        PeltConfig {
            penalty: 3.0 * (t_len.max(2) as f64).ln(),
            min_size: 10,
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty.is_finite() && self.penalty > 0.0) {
            return Err(LokiError::InvalidArgument(format!(
                "pelt penalty must be positive and finite, got {}",
                self.penalty
            )));
        }
        if self.min_size == 0 {
            return Err(LokiError::InvalidArgument("pelt min_size must be >= 1".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(LokiError::InvalidArgument(format!(
                    "rbf bandwidth must be positive and finite, got {h}"
                )));
            }
        }
        Ok(())
    }
}

fn check_finite(series: &[f64]) -> Result<()> {
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(LokiError::Data(format!("non-finite series value at index {i}")));
    }
    Ok(())
}

/// Median-heuristic bandwidth over at most 512 evenly spaced samples.
pub fn median_bandwidth(series: &[f64]) -> f64 {
    const MAX_POINTS: usize = 512;
    let n = series.len();
    let sample: Vec<f64> = if n <= MAX_POINTS {
        series.to_vec()
    } else {
        (0..MAX_POINTS).map(|i| series[i * n / MAX_POINTS]).collect()
    };
    let mut diffs = Vec::with_capacity(sample.len() * (sample.len().saturating_sub(1)) / 2);
    for s in 0..sample.len() {
        for t in s + 1..sample.len() {
            diffs.push((sample[s] - sample[t]).abs());
        }
    }
    if diffs.is_empty() {
        return 1e-6;
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    diffs[diffs.len() / 2].max(1e-6)
}

fn resolve_bandwidth(series: &[f64], bw: Bandwidth) -> f64 {
    match bw {
        Bandwidth::Median => median_bandwidth(series),
        Bandwidth::Fixed(h) => h,
    }
}

/// Within-segment RBF scatter of `series[a..b)`:
/// `(b-a) - (1/(b-a)) · Σ_{s,t} exp(-(y_s-y_t)² / (2h²))`.
///
/// Zero for single-point and constant segments; grows with in-segment spread.
pub fn rbf_cost(series: &[f64], a: usize, b: usize, bandwidth: f64) -> f64 {
    assert!(a < b && b <= series.len(), "rbf_cost: invalid segment [{a}, {b})");
    assert!(bandwidth > 0.0, "rbf_cost: bandwidth must be positive");
    let n = (b - a) as f64;
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut gram = 0.0;
    for s in a..b {
        for t in a..b {
            let d = series[s] - series[t];
            gram += (-d * d * inv).exp();
        }
    }
    (n - gram / n).max(0.0)
}

/// O(1) segment costs backed by a Gram prefix-sum table.
struct SegmentCost {
    /// prefix[i][j] = Σ_{s<i, t<j} k(y_s, y_t), flattened to (T+1)².
    prefix: Vec<f64>,
    t_len: usize,
}

impl SegmentCost {
    fn new(series: &[f64], bandwidth: f64) -> Self {
        let t_len = series.len();
        let w = t_len + 1;
        let inv = 1.0 / (2.0 * bandwidth * bandwidth);
        let mut prefix = vec![0.0; w * w];
        for i in 1..w {
            for j in 1..w {
                let d = series[i - 1] - series[j - 1];
                let k = (-d * d * inv).exp();
                prefix[i * w + j] =
                    k + prefix[(i - 1) * w + j] + prefix[i * w + j - 1] - prefix[(i - 1) * w + j - 1];
            }
        }
        SegmentCost { prefix, t_len }
    }

    fn cost(&self, a: usize, b: usize) -> f64 {
        debug_assert!(a < b && b <= self.t_len);
        let w = self.t_len + 1;
        let gram = self.prefix[b * w + b] - self.prefix[a * w + b] - self.prefix[b * w + a]
            + self.prefix[a * w + a];
        let n = (b - a) as f64;
        (n - gram / n).max(0.0)
    }
}

/// Penalized exact change-point detection (PELT).
///
/// Returns strictly ascending interior indices; index `i` means a new segment
/// starts at sample `i`. A series shorter than `2·min_size` yields no change
/// points. Pruning is lossless for this cost, so the result equals the
/// exhaustive minimum of the same objective.
pub fn pelt(series: &[f64], config: &PeltConfig) -> Result<Vec<usize>> {
    config.validate()?;
    check_finite(series)?;
    let t_len = series.len();
    if t_len < 2 * config.min_size {
        return Ok(Vec::new());
    }
    let h = resolve_bandwidth(series, config.bandwidth);
    let costs = SegmentCost::new(series, h);
    let beta = config.penalty;
    let min = config.min_size;

    // f[t] = minimal penalized cost of segmenting series[0..t); f[0] = -beta
    // so that the per-segment beta telescopes to beta per change point.
    let mut f = vec![f64::INFINITY; t_len + 1];
    let mut prev = vec![0usize; t_len + 1];
    f[0] = -beta;
    let mut candidates: Vec<usize> = vec![0];
    for t in min..=t_len {
        let mut best = f64::INFINITY;
        let mut best_s = 0;
        for &s in &candidates {
            if t < s + min {
                continue;
            }
            let total = f[s] + costs.cost(s, t) + beta;
            if total < best {
                best = total;
                best_s = s;
            }
        }
        f[t] = best;
        prev[t] = best_s;
        // Lossless pruning. Superadditivity of the cost makes any s with
        // f[s] + cost(s,a) > f[a] dominated by a at every u >= a + min, so
        // the largest anchor valid for all future iterations is a = t+1-min.
        // Anchors inside (0, min) have f[a] = inf and prune nothing.
        let a = t + 1 - min;
        if f[a].is_finite() {
            candidates.retain(|&s| s >= a || f[s] + costs.cost(s, a) <= f[a]);
        }
        if t + min <= t_len {
            // Boundary t becomes usable once a minimum-size segment fits.
            candidates.push(t);
        }
    }

    let mut boundaries = Vec::new();
    let mut t = t_len;
    while t > 0 {
        let s = prev[t];
        if s == 0 {
            break;
        }
        boundaries.push(s);
        t = s;
    }
    boundaries.reverse();
    Ok(boundaries)
}

/// Exhaustive minimizer of the PELT objective; oracle for short series.
pub fn brute_force_segment(series: &[f64], config: &PeltConfig) -> Result<Vec<usize>> {
    config.validate()?;
    check_finite(series)?;
    let t_len = series.len();
    if t_len < 2 * config.min_size {
        return Ok(Vec::new());
    }
    let h = resolve_bandwidth(series, config.bandwidth);
    let costs = SegmentCost::new(series, h);
    let beta = config.penalty;
    let min = config.min_size;

    let mut best_total = f64::INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();

    // Enumerates all boundary sets in lexicographic order; strict improvement
    // keeps the lexicographically first optimum on exact ties.
    fn recurse(
        start: usize,
        acc: f64,
        t_len: usize,
        min: usize,
        beta: f64,
        costs: &SegmentCost,
        stack: &mut Vec<usize>,
        best_total: &mut f64,
        best: &mut Vec<usize>,
    ) {
        // Close the segmentation: final segment [start, t_len).
        if t_len - start >= min {
            let total = acc + costs.cost(start, t_len);
            if total < *best_total {
                *best_total = total;
                *best = stack.clone();
            }
        }
        // Or place the next boundary at b and recurse.
        let lo = start + min;
        if lo + min > t_len {
            return;
        }
        for b in lo..=t_len - min {
            let acc_b = acc + costs.cost(start, b) + beta;
            stack.push(b);
            recurse(b, acc_b, t_len, min, beta, costs, stack, best_total, best);
            stack.pop();
        }
    }

    recurse(0, 0.0, t_len, min, beta, &costs, &mut stack, &mut best_total, &mut best);
    Ok(best)
}

/// Centered moving average with full width `w` (radius (w-1)/2); edge windows
/// truncate to the available samples. Output length equals input length.
pub fn smooth(series: &[f64], w: usize) -> Result<Series> {
    if w == 0 {
        return Err(LokiError::InvalidArgument("smoothing width must be >= 1".into()));
    }
    check_finite(series)?;
    let r = (w - 1) / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        let sum: f64 = series[lo..hi].iter().sum();
        out.push(sum / (hi - lo) as f64);
    }
    Ok(out)
}

/// Discrete second derivative `y[t+1] - 2y[t] + y[t-1]` (length n-2, offset 1).
pub fn second_derivative(series: &[f64]) -> Series {
    if series.len() < 3 {
        return Vec::new();
    }
    (1..series.len() - 1)
        .map(|t| series[t + 1] - 2.0 * series[t] + series[t - 1])
        .collect()
}

/// Indices of prominent strict local maxima of the second derivative.
///
/// A peak is kept if its d² value is at least θ·std of the d² array;
/// peaks closer than `min_gap` are resolved in favor of the larger value.
/// Returned indices are positions in the original series, ascending.
pub fn second_derivative_peaks(series: &[f64], theta: f64, min_gap: usize) -> Result<Vec<usize>> {
    if !theta.is_finite() {
        return Err(LokiError::InvalidArgument("prominence factor must be finite".into()));
    }
    check_finite(series)?;
    let d2 = second_derivative(series);
    if d2.is_empty() {
        return Ok(Vec::new());
    }
    let n = d2.len();
    let mean = d2.iter().sum::<f64>() / n as f64;
    let var = d2.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let threshold = theta * var.sqrt();

    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let left_ok = i == 0 || d2[i] > d2[i - 1];
            let right_ok = i + 1 == n || d2[i] > d2[i + 1];
            left_ok && right_ok && d2[i] >= threshold
        })
        .collect();

    // Greedy non-maximum suppression, larger peak wins, ties to smaller index.
    peaks.sort_by(|&a, &b| d2[b].partial_cmp(&d2[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        if kept.iter().all(|&q| p.abs_diff(q) >= min_gap.max(1)) {
            kept.push(p);
        }
    }
    kept.sort_unstable();
    // d2 index i corresponds to series index i + 1.
    Ok(kept.into_iter().map(|i| i + 1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{chacha, standard_normal};
    use proptest::prelude::*;

    fn step_series(levels: &[(f64, usize)], noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = chacha(seed);
        let mut out = Vec::new();
        for &(level, len) in levels {
            for _ in 0..len {
                out.push(level + noise * standard_normal(&mut rng));
            }
        }
        out
    }

    #[test]
    fn rbf_cost_closed_forms() {
        // Single point: 1 - 1/1 = 0.
        assert_eq!(rbf_cost(&[3.7], 0, 1, 1.0), 0.0);
        // Identical points: n - n²/n = 0.
        assert!(rbf_cost(&[2.0; 6], 0, 6, 0.5) < 1e-12);
        // Two points at distance d: 1 - exp(-d²/(2h²)).
        let d: f64 = 1.3;
        let h: f64 = 0.7;
        let got = rbf_cost(&[0.0, d], 0, 2, h);
        let expect = 1.0 - (-d * d / (2.0 * h * h)).exp();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn prefix_cost_matches_direct_rbf_cost() {
        let series = step_series(&[(0.0, 7), (2.0, 9)], 0.3, 5);
        let h = 0.9;
        let costs = SegmentCost::new(&series, h);
        for a in 0..series.len() {
            for b in a + 1..=series.len() {
                let direct = rbf_cost(&series, a, b, h);
                assert!(
                    (costs.cost(a, b) - direct).abs() < 1e-9,
                    "segment [{a},{b}): {} vs {direct}",
                    costs.cost(a, b)
                );
            }
        }
    }

    #[test]
    fn constant_series_has_no_change_points() {
        let cfg = PeltConfig { penalty: 2.0, min_size: 2, bandwidth: Bandwidth::Median };
        assert_eq!(pelt(&[1.5; 40], &cfg).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn short_series_yields_empty_output() {
        let cfg = PeltConfig { penalty: 2.0, min_size: 10, bandwidth: Bandwidth::Median };
        assert_eq!(pelt(&[0.0; 19], &cfg).unwrap(), Vec::<usize>::new());
        assert_eq!(brute_force_segment(&[0.0; 19], &cfg).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn clean_step_is_found_exactly() {
        let series = step_series(&[(0.0, 50), (5.0, 50)], 0.05, 1);
        let cfg = PeltConfig::bic_default(series.len());
        assert_eq!(pelt(&series, &cfg).unwrap(), vec![50]);
    }

    #[test]
    fn huge_penalty_suppresses_all_change_points() {
        let series = step_series(&[(0.0, 30), (4.0, 30)], 0.05, 2);
        let cfg =
            PeltConfig { penalty: 1e6, min_size: 5, bandwidth: Bandwidth::Median };
        assert_eq!(pelt(&series, &cfg).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn three_level_series_recovers_both_boundaries() {
        let series = step_series(&[(0.0, 40), (4.0, 40), (-3.0, 40)], 0.1, 3);
        let cfg = PeltConfig::bic_default(series.len());
        let got = pelt(&series, &cfg).unwrap();
        assert_eq!(got.len(), 2, "got {got:?}");
        assert!(got[0].abs_diff(40) <= 1 && got[1].abs_diff(80) <= 1, "got {got:?}");
    }

    #[test]
    fn nan_series_is_rejected() {
        let cfg = PeltConfig { penalty: 1.0, min_size: 1, bandwidth: Bandwidth::Median };
        assert!(pelt(&[0.0, f64::NAN, 1.0], &cfg).is_err());
        assert!(smooth(&[f64::NAN], 3).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let series = [0.0; 10];
        for cfg in [
            PeltConfig { penalty: 0.0, min_size: 1, bandwidth: Bandwidth::Median },
            PeltConfig { penalty: -1.0, min_size: 1, bandwidth: Bandwidth::Median },
            PeltConfig { penalty: 1.0, min_size: 0, bandwidth: Bandwidth::Median },
            PeltConfig { penalty: 1.0, min_size: 1, bandwidth: Bandwidth::Fixed(0.0) },
        ] {
            assert!(pelt(&series, &cfg).is_err(), "accepted {cfg:?}");
        }
    }

    #[test]
    fn smooth_splits_impulse_and_preserves_sum() {
        let mut series = vec![0.0; 11];
        series[5] = 9.0;
        let out = smooth(&series, 3).unwrap();
        assert_eq!(out.len(), series.len());
        assert!((out[4] - 3.0).abs() < 1e-12);
        assert!((out[5] - 3.0).abs() < 1e-12);
        assert!((out[6] - 3.0).abs() < 1e-12);
        let sum: f64 = out.iter().sum();
        assert!((sum - 9.0).abs() < 1e-9);
    }

    #[test]
    fn smooth_keeps_constant_series_fixed() {
        let out = smooth(&[2.5; 20], 5).unwrap();
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn single_slope_break_gives_single_peak() {
        // Slope 0 then slope 1: d² is nonzero only at the break.
        let mut series = vec![0.0; 10];
        for i in 0..10 {
            series.push(i as f64 + 1.0);
        }
        let peaks = second_derivative_peaks(&series, 1.0, 3).unwrap();
        assert_eq!(peaks, vec![9]);
    }

    #[test]
    fn close_peaks_keep_the_larger() {
        let mut series = vec![0.0; 30];
        series[10] = -2.0;
        series[13] = -5.0;
        // Impulse valleys create d² maxima at the valley centers.
        let peaks = second_derivative_peaks(&series, 1.0, 5).unwrap();
        assert_eq!(peaks, vec![13]);
    }

    #[test]
    fn median_bandwidth_floors_degenerate_series() {
        assert_eq!(median_bandwidth(&[1.0; 100]), 1e-6);
        assert_eq!(median_bandwidth(&[1.0]), 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pelt_matches_brute_force(
            t_len in 4usize..=20,
            min_size in 1usize..=3,
            penalty in 0.05f64..4.0,
            seed in 0u64..10_000,
        ) {
            let mut rng = chacha(seed);
            let n_levels = 1 + (seed as usize % 3);
            let mut levels = Vec::new();
            let mut remaining = t_len;
            for i in 0..n_levels {
                let len = if i + 1 == n_levels { remaining } else { remaining / 2 };
                remaining -= len.min(remaining);
                levels.push((standard_normal(&mut rng) * 2.0, len));
            }
            let series = step_series(&levels, 0.15, seed.wrapping_add(17));
            let cfg = PeltConfig { penalty, min_size, bandwidth: Bandwidth::Median };
            let fast = pelt(&series, &cfg).unwrap();
            let slow = brute_force_segment(&series, &cfg).unwrap();
            prop_assert_eq!(&fast, &slow, "series {:?}", series);
        }

        #[test]
        fn pelt_respects_min_size(
            seed in 0u64..5_000,
            min_size in 2usize..=8,
        ) {
            let series = step_series(
                &[(0.0, 20), (3.0, 15), (-1.0, 25)],
                0.4,
                seed,
            );
            let cfg = PeltConfig { penalty: 0.5, min_size, bandwidth: Bandwidth::Median };
            let cps = pelt(&series, &cfg).unwrap();
            let mut prev = 0usize;
            for &c in &cps {
                prop_assert!(c >= prev + min_size, "gap violation in {cps:?}");
                prev = c;
            }
            prop_assert!(series.len() >= prev + min_size || cps.is_empty());
        }

        #[test]
        fn rbf_cost_is_shift_invariant(
            shift in -50.0f64..50.0,
            seed in 0u64..1_000,
        ) {
            let series = step_series(&[(0.0, 6), (1.5, 6)], 0.3, seed);
            let shifted: Vec<f64> = series.iter().map(|v| v + shift).collect();
            let a = rbf_cost(&series, 0, series.len(), 0.8);
            let b = rbf_cost(&shifted, 0, shifted.len(), 0.8);
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
