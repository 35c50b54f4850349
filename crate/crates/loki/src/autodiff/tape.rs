//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are flat `f64` vectors (scalars are length-1). A training step
//! builds a fresh graph, calls [`Tape::backward`] on a scalar loss, and reads
//! accumulated leaf gradients back out. Graph construction and backward are
//! single-threaded and allocation-order deterministic.

use crate::{LokiError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise nonlinearity applied by [`Tape::activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

enum Op {
    Leaf,
    StopGradient,
    /// y = W x + b with W row-major (out_dim x in_dim).
    Affine {
        w: Var,
        b: Var,
        x: Var,
        out_dim: usize,
        in_dim: usize,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        k: f64,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    SumSquares(Var),
    /// Σ_d (x_d − target_d)²
    SquaredError {
        x: Var,
        target: Vec<f64>,
    },
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    /// z = μ + exp(logvar/2) ⊙ ε with ε a constant draw.
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
    /// Negative log-density of `target` under N(mean, diag exp(logvar)).
    GaussianNll {
        mean: Var,
        logvar: Var,
        target: Vec<f64>,
    },
    /// KL( N(μ_q, diag e^{l_q}) ‖ N(μ_p, diag e^{l_p}) ), summed over dims.
    DiagGaussianKl {
        mu_q: Var,
        logvar_q: Var,
        mu_p: Var,
        logvar_p: Var,
    },
    /// Weighted binary cross-entropy on a length-1 logit.
    BceWithLogits {
        logit: Var,
        label: f64,
        pos_weight: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::Affine { .. } => "affine",
            Op::Activation { .. } => "activation",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::SquaredError { .. } => "squared_error",
            Op::Exp(_) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Reparam { .. } => "reparam",
            Op::GaussianNll { .. } => "gaussian_nll",
            Op::DiagGaussianKl { .. } => "diag_gaussian_kl",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. Zeros if unreached.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Registers a differentiable leaf (parameter slice).
    pub fn leaf(&mut self, value: &[f64]) -> Var {
        self.push(value.to_vec(), Op::Leaf)
    }

    /// Registers a constant input. Constants are leaves whose gradient is
    /// simply never read.
    pub fn constant(&mut self, value: &[f64]) -> Var {
        self.push(value.to_vec(), Op::Leaf)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::StopGradient)
    }

    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Var {
        let in_dim = self.nodes[x.0].value.len();
        let out_dim = self.nodes[b.0].value.len();
        assert_eq!(
            self.nodes[w.0].value.len(),
            out_dim * in_dim,
            "affine weight shape mismatch"
        );
        let mut y = vec![0.0; out_dim];
        {
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            let xv = &self.nodes[x.0].value;
            for o in 0..out_dim {
                let row = &wv[o * in_dim..(o + 1) * in_dim];
                let mut acc = bv[o];
                for i in 0..in_dim {
                    acc += row[i] * xv[i];
                }
                y[o] = acc;
            }
        }
        self.push(y, Op::Affine { w, b, x, out_dim, in_dim })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| kind.apply(v)).collect();
        self.push(y, Op::Activation { x, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.zip(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v * k).collect();
        self.push(y, Op::Scale { x, k })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(y, Op::Slice { x, start })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![s], Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().map(|&v| v * v).sum();
        self.push(vec![s], Op::SumSquares(x))
    }

    pub fn squared_error(&mut self, x: Var, target: &[f64]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), target.len(), "squared_error shape mismatch");
        let s: f64 = xv.iter().zip(target).map(|(&a, &t)| (a - t) * (a - t)).sum();
        self.push(vec![s], Op::SquaredError { x, target: target.to_vec() })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.exp()).collect();
        self.push(y, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn reparam(&mut self, mu: Var, logvar: Var, eps: &[f64]) -> Var {
        let mv = &self.nodes[mu.0].value;
        let lv = &self.nodes[logvar.0].value;
        assert_eq!(mv.len(), lv.len(), "reparam shape mismatch");
        assert_eq!(mv.len(), eps.len(), "reparam noise shape mismatch");
        let y: Vec<f64> = mv
            .iter()
            .zip(lv)
            .zip(eps)
            .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
            .collect();
        self.push(y, Op::Reparam { mu, logvar, eps: eps.to_vec() })
    }

    pub fn gaussian_nll(&mut self, mean: Var, logvar: Var, target: &[f64]) -> Var {
        let mv = &self.nodes[mean.0].value;
        let lv = &self.nodes[logvar.0].value;
        assert_eq!(mv.len(), lv.len(), "gaussian_nll shape mismatch");
        assert_eq!(mv.len(), target.len(), "gaussian_nll target shape mismatch");
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let s: f64 = mv
            .iter()
            .zip(lv)
            .zip(target)
            .map(|((&m, &l), &t)| 0.5 * (ln_2pi + l + (t - m) * (t - m) * (-l).exp()))
            .sum();
        self.push(vec![s], Op::GaussianNll { mean, logvar, target: target.to_vec() })
    }

    pub fn diag_gaussian_kl(&mut self, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Var {
        let mq = &self.nodes[mu_q.0].value;
        let lq = &self.nodes[logvar_q.0].value;
        let mp = &self.nodes[mu_p.0].value;
        let lp = &self.nodes[logvar_p.0].value;
        assert!(
            mq.len() == lq.len() && mq.len() == mp.len() && mq.len() == lp.len(),
            "kl shape mismatch"
        );
        let s: f64 = (0..mq.len())
            .map(|d| {
                let dm = mq[d] - mp[d];
                0.5 * ((lq[d] - lp[d]).exp() + dm * dm * (-lp[d]).exp() - 1.0 + lp[d] - lq[d])
            })
            .sum();
        self.push(vec![s], Op::DiagGaussianKl { mu_q, logvar_q, mu_p, logvar_p })
    }

    pub fn bce_with_logits(&mut self, logit: Var, label: f64, pos_weight: f64) -> Var {
        let z = self.nodes[logit.0].value[0];
        let loss = pos_weight * label * softplus(-z) + (1.0 - label) * softplus(z);
        self.push(vec![loss], Op::BceWithLogits { logit, label, pos_weight })
    }

    /// Accumulates gradients of a scalar `loss` into every node.
    ///
    /// Fails on a non-scalar loss and on any non-finite node value, naming
    /// the offending op.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(LokiError::InvalidArgument(format!(
                "backward requires a scalar loss, got length {}",
                self.nodes[loss.0].value.len()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(LokiError::InvalidArgument(format!(
                    "non-finite value in node {i} ({})",
                    n.op.name()
                )));
            }
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            match &self.nodes[i].op {
                Op::Leaf | Op::StopGradient => {}
                Op::Affine { w, b, x, out_dim, in_dim } => {
                    let (w, b, x, out_dim, in_dim) = (*w, *b, *x, *out_dim, *in_dim);
                    for o in 0..out_dim {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        self.grads[b.0][o] += go;
                        for idx in 0..in_dim {
                            let xv = self.nodes[x.0].value[idx];
                            let wv = self.nodes[w.0].value[o * in_dim + idx];
                            self.grads[w.0][o * in_dim + idx] += go * xv;
                            self.grads[x.0][idx] += go * wv;
                        }
                    }
                }
                Op::Activation { x, kind } => {
                    let x = *x;
                    let kind = *kind;
                    for (d, &gd) in g.iter().enumerate() {
                        let y = self.nodes[i].value[d];
                        let xv = self.nodes[x.0].value[d];
                        let dydx = match kind {
                            Activation::Tanh => 1.0 - y * y,
                            Activation::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => y * (1.0 - y),
                            Activation::Identity => 1.0,
                        };
                        self.grads[x.0][d] += gd * dydx;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (d, &gd) in g.iter().enumerate() {
                        self.grads[a.0][d] += gd;
                        self.grads[b.0][d] += gd;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    for (d, &gd) in g.iter().enumerate() {
                        self.grads[a.0][d] += gd;
                        self.grads[b.0][d] -= gd;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for (d, &gd) in g.iter().enumerate() {
                        let av = self.nodes[a.0].value[d];
                        let bv = self.nodes[b.0].value[d];
                        self.grads[a.0][d] += gd * bv;
                        self.grads[b.0][d] += gd * av;
                    }
                }
                Op::Scale { x, k } => {
                    let (x, k) = (*x, *k);
                    for (d, &gd) in g.iter().enumerate() {
                        self.grads[x.0][d] += gd * k;
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for d in 0..len {
                            self.grads[p.0][d] += g[off + d];
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let (x, start) = (*x, *start);
                    for (d, &gd) in g.iter().enumerate() {
                        self.grads[x.0][start + d] += gd;
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    let g0 = g[0];
                    for d in 0..self.nodes[x.0].value.len() {
                        self.grads[x.0][d] += g0;
                    }
                }
                Op::SumSquares(x) => {
                    let x = *x;
                    let g0 = g[0];
                    for d in 0..self.nodes[x.0].value.len() {
                        let xv = self.nodes[x.0].value[d];
                        self.grads[x.0][d] += 2.0 * g0 * xv;
                    }
                }
                Op::SquaredError { x, target } => {
                    let x = *x;
                    let target = target.clone();
                    let g0 = g[0];
                    for (d, &t) in target.iter().enumerate() {
                        let xv = self.nodes[x.0].value[d];
                        self.grads[x.0][d] += 2.0 * g0 * (xv - t);
                    }
                }
                Op::Exp(x) => {
                    let x = *x;
                    for (d, &gd) in g.iter().enumerate() {
                        let y = self.nodes[i].value[d];
                        self.grads[x.0][d] += gd * y;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    for (d, &gd) in g.iter().enumerate() {
                        let xv = self.nodes[x.0].value[d];
                        if xv >= lo && xv <= hi {
                            self.grads[x.0][d] += gd;
                        }
                    }
                }
                Op::Reparam { mu, logvar, eps } => {
                    let (mu, logvar) = (*mu, *logvar);
                    let eps = eps.clone();
                    for (d, &gd) in g.iter().enumerate() {
                        let l = self.nodes[logvar.0].value[d];
                        self.grads[mu.0][d] += gd;
                        self.grads[logvar.0][d] += gd * 0.5 * (0.5 * l).exp() * eps[d];
                    }
                }
                Op::GaussianNll { mean, logvar, target } => {
                    let (mean, logvar) = (*mean, *logvar);
                    let target = target.clone();
                    let g0 = g[0];
                    for (d, &t) in target.iter().enumerate() {
                        let m = self.nodes[mean.0].value[d];
                        let l = self.nodes[logvar.0].value[d];
                        let inv_var = (-l).exp();
                        self.grads[mean.0][d] += g0 * (m - t) * inv_var;
                        self.grads[logvar.0][d] += g0 * 0.5 * (1.0 - (t - m) * (t - m) * inv_var);
                    }
                }
                Op::DiagGaussianKl { mu_q, logvar_q, mu_p, logvar_p } => {
                    let (mu_q, logvar_q, mu_p, logvar_p) = (*mu_q, *logvar_q, *mu_p, *logvar_p);
                    let g0 = g[0];
                    for d in 0..self.nodes[mu_q.0].value.len() {
                        let dm = self.nodes[mu_q.0].value[d] - self.nodes[mu_p.0].value[d];
                        let lq = self.nodes[logvar_q.0].value[d];
                        let lp = self.nodes[logvar_p.0].value[d];
                        let ratio = (lq - lp).exp();
                        let inv_p = (-lp).exp();
                        self.grads[mu_q.0][d] += g0 * dm * inv_p;
                        self.grads[mu_p.0][d] -= g0 * dm * inv_p;
                        self.grads[logvar_q.0][d] += g0 * 0.5 * (ratio - 1.0);
                        self.grads[logvar_p.0][d] += g0 * 0.5 * (1.0 - ratio - dm * dm * inv_p);
                    }
                }
                Op::BceWithLogits { logit, label, pos_weight } => {
                    let (logit, label, pos_weight) = (*logit, *label, *pos_weight);
                    let z = self.nodes[logit.0].value[0];
                    let s = sigmoid(z);
                    self.grads[logit.0][0] += g[0] * (pos_weight * label * (s - 1.0) + (1.0 - label) * s);
                }
            }
            self.grads[i] = g;
        }
        Ok(())
    }
}
