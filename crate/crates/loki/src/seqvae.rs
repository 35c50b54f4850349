//! Stage 2 — windowed sequential VAE over macro segments.
//!
//! Fixed-length windows of transitions are encoded by a posterior network
//! `q(z|window)`, regularized toward a prior `p(z|s_i, c)` that sees only the
//! window's initial state and the task label, and decoded per step from
//! `(z, s_t, c)`. Reconstruction-error curves over trained segments expose
//! skill transitions as error spikes; candidate split points are the
//! prominent second-derivative peaks of the smoothed curve. Segment
//! embeddings (posterior means of length-resampled segments) feed the
//! refinement stage.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, forward_mlp, AdamConfig, AdamState, Activation, BoundMlp, MlpParams, Tape, Var,
};
use crate::changepoint::{second_derivative, second_derivative_peaks, smooth};
use crate::dataset::{Dataset, SegmentTag, Trajectory};
use crate::rng::{chacha, standard_normal};
use crate::{one_hot, LokiError, Result};

const CHECKPOINT_EVERY: usize = 100;
/// Log-variances are clamped to [-CLAMP, CLAMP] everywhere they are read.
pub const LOGVAR_CLAMP: f64 = 10.0;

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// One macro segment's location: transition span `[start, end)` of a
/// trajectory, with the intrinsic/extrinsic tag it inherited from stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub trajectory: usize,
    pub start: usize,
    pub end: usize,
    pub tag: SegmentTag,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One owned transition inside a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// A fixed-length run of transitions from one macro segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Exactly W steps; consecutive in the source unless `padded`.
    pub steps: Vec<WindowStep>,
    /// The first step's state, the prior network's conditioning input.
    pub initial_state: Vec<f64>,
    pub task: usize,
    pub trajectory: usize,
    /// Transition index of the first step in the source trajectory.
    pub start: usize,
    /// True when the source segment was shorter than W and the final
    /// transition was repeated to fill the window.
    pub padded: bool,
}

impl Window {
    fn from_steps(
        steps: Vec<WindowStep>,
        task: usize,
        trajectory: usize,
        start: usize,
        padded: bool,
    ) -> Window {
        let initial_state = steps[0].state.clone();
        Window { steps, initial_state, task, trajectory, start, padded }
    }

    /// Flattened `(s_t, a_t, s_{t+1})` triples, the posterior input.
    pub fn flatten(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(
            self.steps.len() * (2 * self.steps[0].state.len() + self.steps[0].action.len()),
        );
        for step in &self.steps {
            x.extend_from_slice(&step.state);
            x.extend_from_slice(&step.action);
            x.extend_from_slice(&step.next_state);
        }
        x
    }
}

fn window_step(tr: &Trajectory, t: usize) -> WindowStep {
    WindowStep {
        state: tr.states[t].clone(),
        action: tr.actions[t].clone(),
        next_state: tr.states[t + 1].clone(),
    }
}

/// Slides a width-`w` window over every span with the given stride. Windows
/// never cross span boundaries; the final in-span position is always
/// included so every index is covered. A span shorter than `w` yields a
/// single window padded by repeating its last transition, flagged `padded`.
pub fn extract_windows(
    dataset: &Dataset,
    spans: &[SegmentSpan],
    w: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if w < 2 {
        return Err(LokiError::InvalidArgument("window length must be >= 2".into()));
    }
    if stride == 0 {
        return Err(LokiError::InvalidArgument("stride must be >= 1".into()));
    }
    let mut windows = Vec::new();
    for span in spans {
        let tr = dataset
            .trajectories
            .get(span.trajectory)
            .ok_or_else(|| LokiError::InvalidArgument(format!(
                "span references trajectory {}",
                span.trajectory
            )))?;
        if span.is_empty() || span.end > tr.len() {
            return Err(LokiError::InvalidArgument(format!(
                "span [{}, {}) out of bounds for trajectory {} of length {}",
                span.start,
                span.end,
                span.trajectory,
                tr.len()
            )));
        }
        let len = span.len();
        if len < w {
            let mut steps: Vec<WindowStep> =
                (span.start..span.end).map(|t| window_step(tr, t)).collect();
            while steps.len() < w {
                steps.push(steps.last().unwrap().clone());
            }
            windows.push(Window::from_steps(steps, tr.task, span.trajectory, span.start, true));
            continue;
        }
        let mut starts: Vec<usize> = (span.start..=span.end - w).step_by(stride).collect();
        if *starts.last().unwrap() != span.end - w {
            starts.push(span.end - w);
        }
        for s in starts {
            let steps = (s..s + w).map(|t| window_step(tr, t)).collect();
            windows.push(Window::from_steps(steps, tr.task, span.trajectory, s, false));
        }
    }
    Ok(windows)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Windowed sequential VAE: posterior over the whole window, prior over the
/// window's initial state and task, per-step decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqVaeModel {
    /// Flattened window → (μ_q, log σ_q²).
    pub posterior: MlpParams,
    /// (s_i, one-hot c) → (μ_p, log σ_p²).
    pub prior: MlpParams,
    /// (z, s_t, one-hot c) → (â_t, ŝ_{t+1}).
    pub decoder: MlpParams,
    pub window: usize,
    pub latent: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_tasks: usize,
}

impl SeqVaeModel {
    pub fn init(
        state_dim: usize,
        action_dim: usize,
        n_tasks: usize,
        window: usize,
        config: &SeqVaeConfig,
        rng: &mut ChaCha8Rng,
    ) -> SeqVaeModel {
        let step_dim = 2 * state_dim + action_dim;
        let l = config.latent;
        let dims = |input: usize, output: usize| -> Vec<usize> {
            std::iter::once(input)
                .chain(config.hidden.iter().copied())
                .chain(std::iter::once(output))
                .collect()
        };
        SeqVaeModel {
            posterior: MlpParams::init(
                &dims(window * step_dim, 2 * l),
                Activation::Tanh,
                Activation::Identity,
                rng,
            ),
            prior: MlpParams::init(
                &dims(state_dim + n_tasks, 2 * l),
                Activation::Tanh,
                Activation::Identity,
                rng,
            ),
            decoder: MlpParams::init(
                &dims(l + state_dim + n_tasks, action_dim + state_dim),
                Activation::Tanh,
                Activation::Identity,
                rng,
            ),
            window,
            latent: l,
            state_dim,
            action_dim,
            n_tasks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step_dim = 2 * self.state_dim + self.action_dim;
        if self.posterior.input_dim() != self.window * step_dim
            || self.posterior.output_dim() != 2 * self.latent
        {
            return Err(LokiError::Config("posterior dims inconsistent with window/latent".into()));
        }
        if self.prior.input_dim() != self.state_dim + self.n_tasks
            || self.prior.output_dim() != 2 * self.latent
        {
            return Err(LokiError::Config("prior dims inconsistent with state/tasks".into()));
        }
        if self.decoder.input_dim() != self.latent + self.state_dim + self.n_tasks
            || self.decoder.output_dim() != self.action_dim + self.state_dim
        {
            return Err(LokiError::Config("decoder dims inconsistent".into()));
        }
        Ok(())
    }

    fn check_window(&self, window: &Window) -> Result<()> {
        if window.steps.len() != self.window {
            return Err(LokiError::InvalidArgument(format!(
                "window has {} steps, model expects {}",
                window.steps.len(),
                self.window
            )));
        }
        if window.task >= self.n_tasks {
            return Err(LokiError::InvalidArgument(format!(
                "window task {} out of range (n_tasks {})",
                window.task, self.n_tasks
            )));
        }
        Ok(())
    }

    /// Posterior parameters (μ_q, clamped log σ_q²) of a window.
    pub fn posterior_params(&self, window: &Window) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_window(window)?;
        let out = self.posterior.infer(&window.flatten());
        Ok(split_gaussian(&out, self.latent))
    }

    /// Prior parameters (μ_p, clamped log σ_p²) from an initial state and task.
    pub fn prior_params(&self, initial_state: &[f64], task: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if task >= self.n_tasks {
            return Err(LokiError::InvalidArgument(format!("task {task} out of range")));
        }
        let mut x = initial_state.to_vec();
        x.extend(one_hot(task, self.n_tasks));
        let out = self.prior.infer(&x);
        Ok(split_gaussian(&out, self.latent))
    }

    /// Deterministic per-step decoder output (â_t, ŝ_{t+1}).
    pub fn decode_step(&self, z: &[f64], state: &[f64], task: usize) -> Vec<f64> {
        let mut x = z.to_vec();
        x.extend_from_slice(state);
        x.extend(one_hot(task, self.n_tasks));
        self.decoder.infer(&x)
    }
}

fn split_gaussian(out: &[f64], latent: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = out[..latent].to_vec();
    let logvar = out[latent..].iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
    (mu, logvar)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Components of the stage-2 objective: `total = recon + α_KL · kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqVaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

struct LossGraph {
    tape: Tape,
    posterior: BoundMlp,
    prior: BoundMlp,
    decoder: BoundMlp,
    total: Var,
    recon: Var,
    kl: Var,
}

impl LossGraph {
    fn components(&self) -> Result<SeqVaeLoss> {
        let loss = SeqVaeLoss {
            total: self.tape.scalar(self.total),
            recon: self.tape.scalar(self.recon),
            kl: self.tape.scalar(self.kl),
        };
        for (value, component) in [(loss.recon, "recon"), (loss.kl, "kl"), (loss.total, "total")] {
            if !value.is_finite() {
                return Err(LokiError::NonFinite { component: component.into() });
            }
        }
        Ok(loss)
    }
}

/// Builds the batch-mean loss graph. `eps[i]` is window i's reparameterization
/// noise (empty slice → use the posterior mean, no sampling).
fn build_loss(
    batch: &[&Window],
    model: &SeqVaeModel,
    alpha_kl: f64,
    eps: &[Vec<f64>],
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(LokiError::InvalidArgument("empty window batch".into()));
    }
    let mut tape = Tape::new();
    let posterior = BoundMlp::bind(&mut tape, &model.posterior);
    let prior = BoundMlp::bind(&mut tape, &model.prior);
    let decoder = BoundMlp::bind(&mut tape, &model.decoder);

    let l = model.latent;
    let mut recon_terms = Vec::with_capacity(batch.len());
    let mut kl_terms = Vec::with_capacity(batch.len());
    for (window, e) in batch.iter().zip(eps) {
        model.check_window(window)?;
        let x = tape.constant(&window.flatten());
        let q_out = forward_mlp(&mut tape, &posterior, x)?;
        let mu_q = tape.slice(q_out, 0, l);
        let logvar_q_raw = tape.slice(q_out, l, l);
        let logvar_q = tape.clamp(logvar_q_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);

        let mut prior_in = window.initial_state.clone();
        prior_in.extend(one_hot(window.task, model.n_tasks));
        let p_in = tape.constant(&prior_in);
        let p_out = forward_mlp(&mut tape, &prior, p_in)?;
        let mu_p = tape.slice(p_out, 0, l);
        let logvar_p_raw = tape.slice(p_out, l, l);
        let logvar_p = tape.clamp(logvar_p_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);

        let kl = tape.diag_gaussian_kl(mu_q, logvar_q, mu_p, logvar_p);
        kl_terms.push(kl);

        let z = if e.is_empty() { mu_q } else { tape.reparam(mu_q, logvar_q, e) };
        let mut step_errors = Vec::with_capacity(window.steps.len());
        for step in &window.steps {
            let s = tape.constant(&step.state);
            let task_vec = tape.constant(&one_hot(window.task, model.n_tasks));
            let dec_in = tape.concat(&[z, s, task_vec]);
            let y = forward_mlp(&mut tape, &decoder, dec_in)?;
            let a_hat = tape.slice(y, 0, model.action_dim);
            let s_hat = tape.slice(y, model.action_dim, model.state_dim);
            let ea = tape.squared_error(a_hat, &step.action);
            let es = tape.squared_error(s_hat, &step.next_state);
            step_errors.push(tape.add(ea, es));
        }
        let per_window = tape.concat(&step_errors);
        recon_terms.push(tape.sum(per_window));
    }
    let recon = mean_of(&mut tape, &recon_terms);
    let kl = mean_of(&mut tape, &kl_terms);
    let weighted = tape.scale(kl, alpha_kl);
    let total = tape.add(recon, weighted);
    Ok(LossGraph { tape, posterior, prior, decoder, total, recon, kl })
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let all = tape.concat(terms);
    let sum = tape.sum(all);
    tape.scale(sum, 1.0 / terms.len() as f64)
}

/// Loss of a single window with z drawn once via reparameterization.
pub fn seqvae_loss(
    window: &Window,
    model: &SeqVaeModel,
    alpha_kl: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SeqVaeLoss> {
    let e: Vec<f64> = (0..model.latent).map(|_| standard_normal(rng)).collect();
    let graph = build_loss(&[window], model, alpha_kl, std::slice::from_ref(&e))?;
    graph.components()
}

/// Deterministic dataset-level loss with z = μ_q (no sampling); the
/// evaluation used for train reports and error curves.
pub fn evaluate_windows(
    windows: &[&Window],
    model: &SeqVaeModel,
    alpha_kl: f64,
) -> Result<SeqVaeLoss> {
    let eps = vec![Vec::new(); windows.len()];
    let graph = build_loss(windows, model, alpha_kl, &eps)?;
    graph.components()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Stage-2 training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqVaeConfig {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear learning-rate ramp-in steps.
    pub warmup: usize,
    pub alpha_kl: f64,
    /// Windows held out of training for the loss report.
    pub holdout: usize,
}

impl Default for SeqVaeConfig {
    fn default() -> Self {
        SeqVaeConfig {
            latent: 8,
            hidden: vec![64, 64],
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup: 200,
            alpha_kl: 0.1,
            holdout: 64,
        }
    }
}

impl SeqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.steps == 0 || self.batch_size == 0 || self.holdout == 0 {
            return Err(LokiError::Config(
                "latent, steps, batch_size and holdout must be >= 1".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(LokiError::Config("hidden widths must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LokiError::Config("learning_rate must be finite and > 0".into()));
        }
        if !(self.alpha_kl.is_finite() && self.alpha_kl >= 0.0) {
            return Err(LokiError::Config("alpha_kl must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Held-out losses around a training run (deterministic z = μ_q evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqVaeTrainReport {
    pub initial_holdout: SeqVaeLoss,
    pub final_holdout: SeqVaeLoss,
    pub holdout_size: usize,
    pub steps: usize,
}

fn is_nonfinite_abort(e: &LokiError) -> bool {
    match e {
        LokiError::NonFinite { .. } => true,
        LokiError::InvalidArgument(msg) => msg.contains("non-finite"),
        _ => false,
    }
}

/// Trains the sequential VAE on extracted windows. Deterministic given the
/// seed; aborts with the last parameter snapshot if the loss diverges.
pub fn train_seqvae(
    windows: &[Window],
    config: &SeqVaeConfig,
    seed: u64,
) -> Result<(SeqVaeModel, SeqVaeTrainReport)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(LokiError::InvalidArgument("no windows to train on".into()));
    }
    let w = windows[0].steps.len();
    let state_dim = windows[0].steps[0].state.len();
    let action_dim = windows[0].steps[0].action.len();
    let n_tasks = windows.iter().map(|win| win.task).max().unwrap() + 1;
    for win in windows {
        if win.steps.len() != w
            || win.steps[0].state.len() != state_dim
            || win.steps[0].action.len() != action_dim
        {
            return Err(LokiError::InvalidArgument("windows have inconsistent dims".into()));
        }
    }
    if config.holdout + 1 > windows.len() {
        return Err(LokiError::Config(format!(
            "holdout {} leaves no training windows out of {}",
            config.holdout,
            windows.len()
        )));
    }

    let mut rng = chacha(seed);
    let mut model = SeqVaeModel::init(state_dim, action_dim, n_tasks, w, config, &mut rng);
    model.validate()?;

    let mut index: Vec<usize> = (0..windows.len()).collect();
    index.shuffle(&mut rng);
    let (holdout_idx, train_idx) = index.split_at(config.holdout);
    let holdout: Vec<&Window> = holdout_idx.iter().map(|&i| &windows[i]).collect();

    let initial_holdout = evaluate_windows(&holdout, &model, config.alpha_kl)?;

    let mut lens = model.posterior.array_lens();
    lens.extend(model.prior.array_lens());
    lens.extend(model.decoder.array_lens());
    let mut adam = AdamState::new(&lens);

    let mut checkpoint = serde_json::to_string(&model)?;
    for step in 0..config.steps {
        let ramp = if config.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / config.warmup as f64).min(1.0)
        };
        let adam_cfg = AdamConfig::with_lr(ramp * config.learning_rate);
        let batch: Vec<&Window> = (0..config.batch_size)
            .map(|_| &windows[train_idx[rng.random_range(0..train_idx.len())]])
            .collect();
        let eps: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| (0..config.latent).map(|_| standard_normal(&mut rng)).collect())
            .collect();

        let result = (|| -> Result<()> {
            let mut graph = build_loss(&batch, &model, config.alpha_kl, &eps)?;
            graph.components()?;
            graph.tape.backward(graph.total)?;
            let mut grads: Vec<&[f64]> = graph.posterior.grad_refs(&graph.tape);
            grads.extend(graph.prior.grad_refs(&graph.tape));
            grads.extend(graph.decoder.grad_refs(&graph.tape));
            let mut arrays: Vec<&mut Vec<f64>> = model.posterior.arrays_mut();
            arrays.extend(model.prior.arrays_mut());
            arrays.extend(model.decoder.arrays_mut());
            adam_step(&mut arrays, &grads, &mut adam, &adam_cfg)
        })();
        match result {
            Ok(()) => {}
            Err(e) if is_nonfinite_abort(&e) => {
                let component = match e {
                    LokiError::NonFinite { component } => component,
                    other => other.to_string(),
                };
                return Err(LokiError::Diverged {
                    component: format!("seqvae {component}"),
                    step,
                    last_checkpoint: Some(checkpoint),
                });
            }
            Err(e) => return Err(e),
        }
        if (step + 1) % CHECKPOINT_EVERY == 0 {
            checkpoint = serde_json::to_string(&model)?;
        }
    }

    let final_holdout = evaluate_windows(&holdout, &model, config.alpha_kl)?;
    let report = SeqVaeTrainReport {
        initial_holdout,
        final_holdout,
        holdout_size: config.holdout,
        steps: config.steps,
    };
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// Error curves and candidate splits
// ---------------------------------------------------------------------------

/// Per-timestep reconstruction error over one macro segment: each stride-1
/// window is evaluated deterministically with z = μ_q, and every timestep
/// averages the per-step errors of the windows covering it. Padding steps of
/// a short segment's window are not attributed. Output length = span length.
pub fn reconstruction_error_curve(
    dataset: &Dataset,
    span: &SegmentSpan,
    model: &SeqVaeModel,
) -> Result<Vec<f64>> {
    let windows = extract_windows(dataset, std::slice::from_ref(span), model.window, 1)?;
    let len = span.len();
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for window in &windows {
        let (mu_q, _) = model.posterior_params(window)?;
        let real = if window.padded { len } else { window.steps.len() };
        for (j, step) in window.steps.iter().take(real).enumerate() {
            let y = model.decode_step(&mu_q, &step.state, window.task);
            let (a_hat, s_hat) = y.split_at(model.action_dim);
            let ea: f64 = a_hat
                .iter()
                .zip(&step.action)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            let es: f64 = s_hat
                .iter()
                .zip(&step.next_state)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            let t = window.start + j - span.start;
            sums[t] += ea + es;
            counts[t] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Peak-picking configuration for candidate split generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakConfig {
    /// Moving-average width applied to the raw error curve.
    pub smooth_width: usize,
    /// Peak prominence: keep d² peaks ≥ mean + θ·std.
    pub theta: f64,
    /// Minimum distance between kept splits and to either segment edge.
    pub min_gap: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig { smooth_width: 5, theta: 1.0, min_gap: 4 }
    }
}

/// Candidate split points of one macro segment: prominent local peaks of the
/// smoothed error curve's second derivative, mapped to trajectory
/// coordinates. Peaks closer than `min_gap` to a segment edge are dropped —
/// they would create degenerate micro-segments.
pub fn candidate_splits(
    curve: &[f64],
    config: &PeakConfig,
    span_start: usize,
) -> Result<Vec<usize>> {
    if curve.len() < 3 {
        return Ok(Vec::new());
    }
    let smoothed = smooth(curve, config.smooth_width)?;
    let peaks = second_derivative_peaks(&smoothed, config.theta, config.min_gap)?;
    Ok(peaks
        .into_iter()
        .filter(|&p| p >= config.min_gap && p + config.min_gap <= curve.len())
        .map(|p| span_start + p)
        .collect())
}

/// Smoothed curve and its second derivative, the export behind candidate
/// splits (CSV column order: t, raw, smoothed, d2).
pub fn curve_diagnostics(curve: &[f64], config: &PeakConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let smoothed = smooth(curve, config.smooth_width)?;
    let mut d2 = vec![0.0];
    d2.extend(second_derivative(&smoothed));
    d2.resize(curve.len(), 0.0);
    Ok((smoothed, d2))
}

// ---------------------------------------------------------------------------
// Segment embeddings
// ---------------------------------------------------------------------------

/// A macro/micro segment embedded as the posterior mean of its
/// length-W resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEmbedding {
    pub mu: Vec<f64>,
    pub span: SegmentSpan,
}

/// Embeds a segment: its transitions are resampled to exactly W by uniform
/// index interpolation (nearest index), then encoded; μ_q is returned.
/// Deterministic.
pub fn embed_segment(
    dataset: &Dataset,
    span: &SegmentSpan,
    model: &SeqVaeModel,
) -> Result<SegmentEmbedding> {
    if span.is_empty() {
        return Err(LokiError::InvalidArgument("cannot embed an empty segment".into()));
    }
    let tr = dataset
        .trajectories
        .get(span.trajectory)
        .ok_or_else(|| LokiError::InvalidArgument(format!(
            "span references trajectory {}",
            span.trajectory
        )))?;
    if span.end > tr.len() {
        return Err(LokiError::InvalidArgument(format!(
            "span [{}, {}) out of bounds for trajectory of length {}",
            span.start,
            span.end,
            tr.len()
        )));
    }
    let w = model.window;
    let len = span.len();
    let steps: Vec<WindowStep> = (0..w)
        .map(|j| {
            let frac = if w == 1 { 0.0 } else { j as f64 * (len - 1) as f64 / (w - 1) as f64 };
            window_step(tr, span.start + frac.round() as usize)
        })
        .collect();
    let window = Window::from_steps(steps, tr.task, span.trajectory, span.start, len < w);
    let (mu, _) = model.posterior_params(&window)?;
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(LokiError::NonFinite { component: "segment embedding".into() });
    }
    Ok(SegmentEmbedding { mu, span: *span })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, normalize, SyntheticKitchenSpec};

    /// Hand-built dataset: one trajectory per entry of `lens`, states 2-D,
    /// actions 1-D, all values derived from the index so reconstructions are
    /// checkable.
    fn toy_dataset(lens: &[usize]) -> Dataset {
        let trajectories = lens
            .iter()
            .enumerate()
            .map(|(task, &len)| {
                let states = (0..=len).map(|t| vec![t as f64, 0.5 * t as f64]).collect();
                let actions = (0..len).map(|t| vec![0.1 * t as f64]).collect();
                Trajectory { task: task % 2, states, actions, gt_boundaries: None }
            })
            .collect();
        Dataset::new(trajectories).unwrap()
    }

    fn span(trajectory: usize, start: usize, end: usize) -> SegmentSpan {
        SegmentSpan { trajectory, start, end, tag: SegmentTag::Intrinsic }
    }

    fn tiny_model(dataset: &Dataset, w: usize) -> (SeqVaeModel, SeqVaeConfig) {
        let config = SeqVaeConfig { latent: 3, hidden: vec![8], ..Default::default() };
        let mut rng = chacha(1);
        let n_tasks = dataset.n_tasks;
        let model =
            SeqVaeModel::init(dataset.state_dim, dataset.action_dim, n_tasks, w, &config, &mut rng);
        (model, config)
    }

    #[test]
    fn window_extraction_covers_grid_and_tail() {
        let ds = toy_dataset(&[20]);
        let windows = extract_windows(&ds, &[span(0, 0, 20)], 10, 5).unwrap();
        let starts: Vec<usize> = windows.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 5, 10]);
        assert!(windows.iter().all(|w| !w.padded && w.steps.len() == 10));
        // Stride grid missing the tail gets an extra final window.
        let windows = extract_windows(&ds, &[span(0, 0, 13)], 10, 2).unwrap();
        let starts: Vec<usize> = windows.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 2, 3]);
        // Consecutiveness within every window.
        for w in &windows {
            for pair in w.steps.windows(2) {
                assert_eq!(pair[0].next_state, pair[1].state);
            }
            assert_eq!(w.initial_state, w.steps[0].state);
        }
    }

    #[test]
    fn short_segment_yields_one_padded_window() {
        let ds = toy_dataset(&[20]);
        let windows = extract_windows(&ds, &[span(0, 4, 11)], 10, 5).unwrap();
        assert_eq!(windows.len(), 1);
        let w = &windows[0];
        assert!(w.padded);
        assert_eq!(w.steps.len(), 10);
        assert_eq!(w.start, 4);
        // Padding repeats the last real transition.
        for j in 7..10 {
            assert_eq!(w.steps[j], w.steps[6]);
        }
    }

    #[test]
    fn windows_never_cross_segment_boundaries() {
        let ds = toy_dataset(&[30]);
        let spans = [span(0, 0, 15), span(0, 15, 30)];
        let windows = extract_windows(&ds, &spans, 10, 2).unwrap();
        for w in &windows {
            let fits_first = w.start + 10 <= 15;
            let fits_second = w.start >= 15 && w.start + 10 <= 30;
            assert!(fits_first || fits_second, "window at {} crosses the boundary", w.start);
        }
        assert!(extract_windows(&ds, &[span(0, 10, 10)], 10, 2).is_err());
        assert!(extract_windows(&ds, &[span(0, 20, 31)], 10, 2).is_err());
        assert!(extract_windows(&ds, &[span(1, 0, 5)], 10, 2).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let ds = toy_dataset(&[20]);
        let (mut model, _) = tiny_model(&ds, 10);
        let windows = extract_windows(&ds, &[span(0, 0, 20)], 10, 5).unwrap();
        // Zero all weights and biases: posterior and prior emit identical
        // (0, 0) Gaussians, so the KL vanishes regardless of the sample.
        for arr in model.posterior.arrays_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        for arr in model.prior.arrays_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = chacha(3);
        let loss = seqvae_loss(&windows[0], &model, 1.0, &mut rng).unwrap();
        assert!(loss.kl.abs() < 1e-12, "kl {}", loss.kl);
        // Shift the prior mean bias to 1 per dim with unit variances:
        // KL(N(0,1) ‖ N(1,1)) = 0.5 per dimension.
        {
            let mut arrays = model.prior.arrays_mut();
            let bias = arrays.last_mut().unwrap();
            for d in 0..3 {
                bias[d] = 1.0;
            }
        }
        let loss = seqvae_loss(&windows[0], &model, 1.0, &mut rng).unwrap();
        assert!((loss.kl - 1.5).abs() < 1e-12, "kl {}", loss.kl);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        // KL(q ‖ p) = E_{z~q}[log q(z) − log p(z)], estimated with 1e5
        // common-random-number samples, must match the closed form within 1%.
        let mu_q = [0.3, -0.7, 1.1];
        let logvar_q = [0.2, -0.4, 0.0];
        let mu_p = [-0.5, 0.4, 0.9];
        let logvar_p = [-0.1, 0.3, 0.5];
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(&mu_q), tape.constant(&logvar_q));
        let (c, d) = (tape.constant(&mu_p), tape.constant(&logvar_p));
        let kl = tape.diag_gaussian_kl(a, b, c, d);
        let closed = tape.scalar(kl);

        let log_pdf = |z: &[f64], mu: &[f64], logvar: &[f64]| -> f64 {
            z.iter()
                .zip(mu.iter().zip(logvar))
                .map(|(&z, (&m, &lv))| {
                    -0.5 * ((z - m) * (z - m) / lv.exp() + lv + (2.0 * std::f64::consts::PI).ln())
                })
                .sum()
        };
        let mut rng = chacha(11);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: Vec<f64> = mu_q
                .iter()
                .zip(&logvar_q)
                .map(|(&m, &lv)| m + (0.5 * lv).exp() * standard_normal(&mut rng))
                .collect();
            acc += log_pdf(&z, &mu_q, &logvar_q) - log_pdf(&z, &mu_p, &logvar_p);
        }
        let mc = acc / n as f64;
        assert!(
            (mc - closed).abs() / closed.abs() < 0.01,
            "closed {closed}, monte carlo {mc}"
        );
    }

    #[test]
    fn perfect_decoder_means_zero_recon() {
        // All-zero data with an all-zero decoder reconstructs exactly.
        let states = vec![vec![0.0, 0.0]; 11];
        let actions = vec![vec![0.0]; 10];
        let ds = Dataset::new(vec![Trajectory {
            task: 0,
            states,
            actions,
            gt_boundaries: None,
        }])
        .unwrap();
        let (mut model, _) = tiny_model(&ds, 10);
        for arr in model.decoder.arrays_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        let windows = extract_windows(&ds, &[span(0, 0, 10)], 10, 1).unwrap();
        let mut rng = chacha(5);
        let loss = seqvae_loss(&windows[0], &model, 0.5, &mut rng).unwrap();
        assert_eq!(loss.recon, 0.0);
        assert!((loss.total - 0.5 * loss.kl).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let ds = toy_dataset(&[20, 20]);
        let (mut model, _) = tiny_model(&ds, 10);
        let windows = extract_windows(&ds, &[span(0, 0, 20), span(1, 0, 20)], 10, 5).unwrap();
        let batch: Vec<&Window> = windows.iter().collect();
        let eps: Vec<Vec<f64>> = {
            let mut rng = chacha(7);
            batch
                .iter()
                .map(|_| (0..3).map(|_| standard_normal(&mut rng)).collect())
                .collect()
        };
        let mut graph = build_loss(&batch, &model, 0.3, &eps).unwrap();
        graph.tape.backward(graph.total).unwrap();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for bound in [&graph.posterior, &graph.prior, &graph.decoder] {
            for g in bound.grad_refs(&graph.tape) {
                grads.push(g.to_vec());
            }
        }
        drop(graph);

        let n_arrays = grads.len();
        let h = 1e-6;
        let mut checked = 0;
        for ai in 0..n_arrays {
            let len = {
                let mut arrays = model.posterior.arrays_mut();
                arrays.extend(model.prior.arrays_mut());
                arrays.extend(model.decoder.arrays_mut());
                arrays[ai].len()
            };
            for ci in (0..len).step_by(7) {
                let eval = |model: &SeqVaeModel| -> f64 {
                    let graph = build_loss(&batch, model, 0.3, &eps).unwrap();
                    graph.tape.scalar(graph.total)
                };
                let poke = |model: &mut SeqVaeModel, delta: f64| {
                    let mut arrays = model.posterior.arrays_mut();
                    arrays.extend(model.prior.arrays_mut());
                    arrays.extend(model.decoder.arrays_mut());
                    arrays[ai][ci] += delta;
                };
                poke(&mut model, h);
                let up = eval(&model);
                poke(&mut model, -2.0 * h);
                let down = eval(&model);
                poke(&mut model, h);
                let fd = (up - down) / (2.0 * h);
                let an = grads[ai][ci];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom < 1e-3,
                    "array {ai} coord {ci}: analytic {an}, fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 64, "only {checked} coordinates checked");
    }

    #[test]
    fn training_reduces_holdout_and_is_deterministic() {
        let spec = SyntheticKitchenSpec::default();
        let raw = generate_synthetic(&spec, 3, 5).unwrap();
        let (data, _) = normalize(&raw);
        let spans: Vec<SegmentSpan> = data
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, tr)| span(i, 0, tr.len()))
            .collect();
        let windows = extract_windows(&data, &spans, 10, 2).unwrap();
        let config = SeqVaeConfig {
            latent: 4,
            hidden: vec![32],
            steps: 400,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup: 50,
            alpha_kl: 0.1,
            holdout: 32,
        };
        let (model, report) = train_seqvae(&windows, &config, 9).unwrap();
        assert!(
            report.final_holdout.total < report.initial_holdout.total,
            "holdout {:?} -> {:?}",
            report.initial_holdout,
            report.final_holdout
        );
        let (model_b, report_b) = train_seqvae(&windows, &config, 9).unwrap();
        assert_eq!(serde_json::to_string(&model).unwrap(), serde_json::to_string(&model_b).unwrap());
        assert_eq!(report, report_b);
        let (_, report_c) = train_seqvae(&windows, &config, 10).unwrap();
        assert_ne!(report, report_c);
    }

    #[test]
    fn kl_weight_zero_reconstructs_no_worse() {
        // Unit-scale data so the KL term competes with reconstruction.
        let trajectories = (0..2)
            .map(|task| Trajectory {
                task,
                states: (0..=40).map(|t| vec![0.05 * t as f64, 0.02 * t as f64]).collect(),
                actions: (0..40).map(|t| vec![0.05 * ((t % 7) as f64 - 3.0)]).collect(),
                gt_boundaries: None,
            })
            .collect();
        let ds = Dataset::new(trajectories).unwrap();
        let spans = [span(0, 0, 40), span(1, 0, 40)];
        let windows = extract_windows(&ds, &spans, 10, 2).unwrap();
        let config = SeqVaeConfig {
            latent: 4,
            hidden: vec![16],
            steps: 600,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup: 50,
            alpha_kl: 0.0,
            holdout: 4,
        };
        let (_, free) = train_seqvae(&windows, &config, 21).unwrap();
        let config_reg = SeqVaeConfig { alpha_kl: 5.0, ..config };
        let (_, reg) = train_seqvae(&windows, &config_reg, 21).unwrap();
        assert!(
            free.final_holdout.recon <= reg.final_holdout.recon + 1e-9,
            "unregularized recon {} vs regularized {}",
            free.final_holdout.recon,
            reg.final_holdout.recon
        );
    }

    #[test]
    fn single_window_is_memorized() {
        let ds = toy_dataset(&[10]);
        let windows = extract_windows(&ds, &[span(0, 0, 10)], 10, 1).unwrap();
        let repeated: Vec<Window> = vec![windows[0].clone(); 8];
        let config = SeqVaeConfig {
            latent: 2,
            hidden: vec![32],
            steps: 1500,
            batch_size: 4,
            learning_rate: 3e-3,
            warmup: 100,
            alpha_kl: 0.0,
            holdout: 2,
        };
        let (model, report) = train_seqvae(&repeated, &config, 2).unwrap();
        assert!(
            report.final_holdout.recon < 0.05,
            "memorization failed: recon {}",
            report.final_holdout.recon
        );
        // Error curve of a perfectly memorized segment is near zero.
        let curve = reconstruction_error_curve(&ds, &span(0, 0, 10), &model).unwrap();
        assert_eq!(curve.len(), 10);
        assert!(curve.iter().all(|&e| e < 0.05), "curve {curve:?}");
    }

    #[test]
    fn error_curve_length_and_zero_case() {
        let states = vec![vec![0.0, 0.0]; 26];
        let actions = vec![vec![0.0]; 25];
        let ds = Dataset::new(vec![Trajectory {
            task: 0,
            states,
            actions,
            gt_boundaries: None,
        }])
        .unwrap();
        let (mut model, _) = tiny_model(&ds, 10);
        for arr in model.decoder.arrays_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        let curve = reconstruction_error_curve(&ds, &span(0, 0, 25), &model).unwrap();
        assert_eq!(curve.len(), 25);
        assert!(curve.iter().all(|&e| e == 0.0));
        // Shorter-than-window segments still produce full-length curves.
        let curve = reconstruction_error_curve(&ds, &span(0, 3, 9), &model).unwrap();
        assert_eq!(curve.len(), 6);
    }

    #[test]
    fn candidate_splits_flat_and_hinge() {
        let flat = vec![1.0; 30];
        let cfg = PeakConfig::default();
        assert!(candidate_splits(&flat, &cfg, 100).unwrap().is_empty());
        // A hinge: flat then sharply rising. The d² of the smoothed curve
        // peaks at the kink.
        let hinge: Vec<f64> = (0..30)
            .map(|t| if t < 15 { 0.0 } else { (t - 15) as f64 })
            .collect();
        let splits = candidate_splits(&hinge, &cfg, 100).unwrap();
        assert_eq!(splits.len(), 1, "splits {splits:?}");
        assert!(splits[0].abs_diff(115) <= 2, "split at {}", splits[0]);
        // Short curves yield nothing rather than erroring.
        assert!(candidate_splits(&[1.0, 2.0], &cfg, 0).unwrap().is_empty());
    }

    #[test]
    fn candidate_splits_respect_edge_margin() {
        // Kink right next to the segment edge is suppressed.
        let mut curve = vec![0.0; 20];
        for (t, v) in curve.iter_mut().enumerate() {
            if t >= 18 {
                *v = (t - 17) as f64 * 5.0;
            }
        }
        let cfg = PeakConfig { smooth_width: 1, theta: 0.5, min_gap: 4 };
        let splits = candidate_splits(&curve, &cfg, 0).unwrap();
        assert!(splits.iter().all(|&s| s >= 4 && s <= 16), "splits {splits:?}");
    }

    #[test]
    fn embeddings_are_deterministic_and_resampled() {
        let ds = toy_dataset(&[30]);
        let (model, _) = tiny_model(&ds, 10);
        let a = embed_segment(&ds, &span(0, 0, 30), &model).unwrap();
        let b = embed_segment(&ds, &span(0, 0, 30), &model).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mu.len(), 3);
        // A length-W segment encodes directly: resampling picks exactly the
        // original transitions.
        let direct = embed_segment(&ds, &span(0, 5, 15), &model).unwrap();
        let windows = extract_windows(&ds, &[span(0, 5, 15)], 10, 1).unwrap();
        let (mu, _) = model.posterior_params(&windows[0]).unwrap();
        assert_eq!(direct.mu, mu);
        assert!(embed_segment(&ds, &span(0, 5, 5), &model).is_err());
    }

    #[test]
    fn embedding_contrast_separates_subtasks() {
        // Two scripted behaviors: "hold still" vs "move right", three
        // repetitions each; same-behavior embeddings must be closer than
        // cross-behavior ones.
        let mut trajectories = Vec::new();
        for rep in 0..3 {
            let offset = 0.01 * rep as f64;
            let hold: Vec<Vec<f64>> = (0..=12).map(|_| vec![offset, 0.0]).collect();
            let move_right: Vec<Vec<f64>> =
                (0..=12).map(|t| vec![offset + 0.3 * t as f64, 0.0]).collect();
            trajectories.push(Trajectory {
                task: 0,
                states: hold,
                actions: vec![vec![0.0]; 12],
                gt_boundaries: None,
            });
            trajectories.push(Trajectory {
                task: 0,
                states: move_right,
                actions: vec![vec![0.3]; 12],
                gt_boundaries: None,
            });
        }
        let ds = Dataset::new(trajectories).unwrap();
        let spans: Vec<SegmentSpan> = (0..6).map(|i| span(i, 0, 12)).collect();
        let windows = extract_windows(&ds, &spans, 10, 1).unwrap();
        let config = SeqVaeConfig {
            latent: 3,
            hidden: vec![16],
            steps: 500,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup: 50,
            alpha_kl: 0.01,
            holdout: 2,
        };
        let (model, _) = train_seqvae(&windows, &config, 4).unwrap();
        let emb: Vec<Vec<f64>> = spans
            .iter()
            .map(|sp| embed_segment(&ds, sp, &model).unwrap().mu)
            .collect();
        let d2 = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        // Even spans hold, odd spans move.
        let same = d2(&emb[0], &emb[2]).max(d2(&emb[1], &emb[3]));
        let cross = d2(&emb[0], &emb[1]).min(d2(&emb[2], &emb[3]));
        assert!(same < cross, "same-behavior {same} vs cross {cross}");
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let bad = SeqVaeConfig { latent: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SeqVaeConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SeqVaeConfig { alpha_kl: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SeqVaeConfig { hidden: vec![0], ..Default::default() };
        assert!(bad.validate().is_err());
        // Unknown fields rejected when parsed from config files.
        let err = serde_json::from_str::<SeqVaeConfig>(
            r#"{"latent":8,"hidden":[64],"steps":10,"batch_size":4,
                "learning_rate":0.001,"warmup":0,"alpha_kl":0.1,
                "holdout":4,"extra":1}"#,
        );
        assert!(err.is_err());
    }
}
