//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::{LokiError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

/// First and second moment estimates, one pair per parameter array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(array_lens: &[usize]) -> Self {
        AdamState {
            m: array_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: array_lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over aligned parameter and gradient arrays.
///
/// `params[i]` and `grads[i]` must have the length the state was built with.
pub fn adam_step(
    params: &mut [&mut Vec<f64>],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LokiError::InvalidArgument(format!(
            "adam_step arity mismatch: {} params, {} grads, {} state arrays",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(LokiError::InvalidArgument(format!(
                "adam_step shape mismatch in array {i}: param {}, grad {}, state {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(LokiError::InvalidArgument(format!(
                "non-finite gradient in array {i} at index {j}"
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for d in 0..p.len() {
            m[d] = cfg.beta1 * m[d] + (1.0 - cfg.beta1) * g[d];
            v[d] = cfg.beta2 * v[d] + (1.0 - cfg.beta2) * g[d] * g[d];
            let m_hat = m[d] / bc1;
            let v_hat = v[d] / bc2;
            p[d] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_computed_update() {
        // g = 0.1, defaults: m = 0.01, v = 1e-5, m̂ = 0.1, v̂ = 0.01,
        // Δ = 1e-3 · 0.1 / (0.1 + 1e-8).
        let cfg = AdamConfig::default();
        let mut p = vec![1.0];
        let g = vec![0.1];
        let mut state = AdamState::new(&[1]);
        adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
        let expect = 1.0 - 1e-3 * 0.1 / (0.01f64.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {}", p[0], expect);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.3, -0.7];
        let g = vec![0.0, 0.0];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0; 3];
        let g = vec![0.0; 2];
        let mut state = AdamState::new(&[3]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &cfg).is_err());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let g = vec![f64::NAN];
        let mut state = AdamState::new(&[1]);
        let err = adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient"));
    }

    #[test]
    fn updates_are_deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = vec![0.5, -0.25, 0.125];
            let mut state = AdamState::new(&[3]);
            for step in 0..50 {
                let g: Vec<f64> = p.iter().map(|&x| 2.0 * x + step as f64 * 1e-3).collect();
                adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
