//! Stage 3 — termination classifier β(s), skill-conditioned behavior-cloned
//! low-level policy π(a|s,k), and the hierarchical executor that runs
//! canonical task programs in the synthetic environment.
//!
//! A segment owns the states its transitions produce (`states[start+1..=end]`
//! of its trajectory); the last of those is the termination classifier's one
//! positive example, the rest its negatives. This keeps the shared boundary
//! state between adjacent segments labeled exactly once.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, forward_mlp, sigmoid, AdamConfig, AdamState, Activation, BoundMlp, MlpParams, Tape,
};
use crate::dataset::{Dataset, NormStats, SyntheticEnv, SyntheticKitchenSpec};
use crate::refine::{LabeledSegment, SkillLibrary, TaskProgram};
use crate::rng::{chacha, standard_normal};
use crate::seqvae::LOGVAR_CLAMP;
use crate::{one_hot, LokiError, Result};
use rand::seq::SliceRandom;
use rand::RngExt;

const CHECKPOINT_EVERY: usize = 100;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn is_nonfinite_abort(e: &LokiError) -> bool {
    match e {
        LokiError::NonFinite { .. } => true,
        LokiError::InvalidArgument(msg) => msg.contains("non-finite"),
        _ => false,
    }
}

fn warmup_ramp(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

// ---------------------------------------------------------------------------
// Termination classifier
// ---------------------------------------------------------------------------

/// State classifier β(s) signaling option completion; the executor switches
/// skills once its output exceeds `theta_term`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationModel {
    /// MLP mapping state to one logit; probability = sigmoid(logit).
    pub net: MlpParams,
    pub theta_term: f64,
    pub state_dim: usize,
}

impl TerminationModel {
    pub fn validate(&self) -> Result<()> {
        if self.net.input_dim() != self.state_dim || self.net.output_dim() != 1 {
            return Err(LokiError::InvalidArgument(
                "termination net must map state_dim -> 1".into(),
            ));
        }
        if !self.theta_term.is_finite() {
            return Err(LokiError::InvalidArgument("theta_term must be finite".into()));
        }
        Ok(())
    }
}

/// Probability that the current skill terminates in `state`.
pub fn termination_predict(model: &TerminationModel, state: &[f64]) -> f64 {
    sigmoid(model.net.infer(state)[0])
}

/// Termination training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminationConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear learning-rate ramp-in steps.
    pub warmup: usize,
    /// Examples held out of training for the loss report.
    pub holdout: usize,
    pub theta_term: f64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        TerminationConfig {
            hidden: vec![32],
            steps: 2000,
            batch_size: 64,
            learning_rate: 3e-3,
            warmup: 100,
            holdout: 64,
            theta_term: 0.5,
        }
    }
}

impl TerminationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.holdout == 0 {
            return Err(LokiError::Config(
                "steps, batch_size and holdout must be >= 1".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(LokiError::Config("hidden widths must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LokiError::Config("learning_rate must be finite and > 0".into()));
        }
        if !(self.theta_term.is_finite() && (0.0..=1.0).contains(&self.theta_term)) {
            return Err(LokiError::Config("theta_term must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Held-out losses around a termination training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationTrainReport {
    pub initial_holdout: f64,
    pub final_holdout: f64,
    pub holdout_size: usize,
    pub steps: usize,
    /// Positive-class weight = #negatives / #positives over the examples.
    pub pos_weight: f64,
    /// Per-step training-batch loss.
    pub loss_curve: Vec<f64>,
}

/// Extracts termination training examples from labeled segments: each
/// segment's produced states `states[start+1..=end]`, the last labeled 1.0
/// and the rest 0.0. Exactly one positive per segment.
pub fn termination_examples(
    dataset: &Dataset,
    segments: &[LabeledSegment],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if segments.is_empty() {
        return Err(LokiError::InvalidArgument("no segments for termination training".into()));
    }
    let mut states = Vec::new();
    let mut labels = Vec::new();
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
        for t in span.start + 1..=span.end {
            states.push(tr.states[t].clone());
            labels.push(if t == span.end { 1.0 } else { 0.0 });
        }
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    assert_eq!(positives, segments.len(), "exactly one positive per segment");
    Ok((states, labels))
}

fn termination_bce(net: &MlpParams, states: &[&Vec<f64>], labels: &[f64], pos_weight: f64) -> f64 {
    let mut sum = 0.0;
    for (s, &y) in states.iter().zip(labels) {
        let z = net.infer(s)[0];
        sum += pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
    }
    sum / states.len() as f64
}

/// Trains β(s) on explicit example states/labels with weighted binary
/// cross-entropy (positive weight = #negatives / #positives).
pub fn train_termination_examples(
    states: &[Vec<f64>],
    labels: &[f64],
    config: &TerminationConfig,
    seed: u64,
) -> Result<(TerminationModel, TerminationTrainReport)> {
    config.validate()?;
    if states.len() != labels.len() {
        return Err(LokiError::InvalidArgument("states and labels differ in length".into()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(LokiError::InvalidArgument("termination labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LokiError::InvalidArgument(
            "termination training needs both positive and negative examples".into(),
        ));
    }
    if config.holdout + 1 > states.len() {
        return Err(LokiError::Config(format!(
            "holdout {} leaves no training examples out of {}",
            config.holdout,
            states.len()
        )));
    }
    let pos_weight = negatives as f64 / positives as f64;
    let state_dim = states[0].len();
    if states.iter().any(|s| s.len() != state_dim) {
        return Err(LokiError::InvalidArgument("states have inconsistent dims".into()));
    }

    let mut rng = chacha(seed);
    let mut dims = vec![state_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(1);
    let mut net = MlpParams::init(&dims, Activation::Tanh, Activation::Identity, &mut rng);

    let mut index: Vec<usize> = (0..states.len()).collect();
    index.shuffle(&mut rng);
    let (holdout_idx, train_idx) = index.split_at(config.holdout);
    let holdout_states: Vec<&Vec<f64>> = holdout_idx.iter().map(|&i| &states[i]).collect();
    let holdout_labels: Vec<f64> = holdout_idx.iter().map(|&i| labels[i]).collect();

    let initial_holdout = termination_bce(&net, &holdout_states, &holdout_labels, pos_weight);

    let mut adam = AdamState::new(&net.array_lens());
    let mut checkpoint = serde_json::to_string(&net)?;
    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let adam_cfg =
            AdamConfig::with_lr(warmup_ramp(step, config.warmup) * config.learning_rate);
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| train_idx[rng.random_range(0..train_idx.len())])
            .collect();
        let result = (|| -> Result<f64> {
            let mut tape = Tape::new();
            let bound = BoundMlp::bind(&mut tape, &net);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = tape.constant(&states[i]);
                let logit = forward_mlp(&mut tape, &bound, x)?;
                terms.push(tape.bce_with_logits(logit, labels[i], pos_weight));
            }
            let all = tape.concat(&terms);
            let sum = tape.sum(all);
            let loss = tape.scale(sum, 1.0 / batch.len() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(LokiError::NonFinite { component: "bce".into() });
            }
            tape.backward(loss)?;
            let grads = bound.grad_refs(&tape);
            let mut arrays = net.arrays_mut();
            adam_step(&mut arrays, &grads, &mut adam, &adam_cfg)?;
            Ok(value)
        })();
        match result {
            Ok(value) => loss_curve.push(value),
            Err(e) if is_nonfinite_abort(&e) => {
                let component = match e {
                    LokiError::NonFinite { component } => component,
                    other => other.to_string(),
                };
                return Err(LokiError::Diverged {
                    component: format!("termination {component}"),
                    step,
                    last_checkpoint: Some(checkpoint),
                });
            }
            Err(e) => return Err(e),
        }
        if (step + 1) % CHECKPOINT_EVERY == 0 {
            checkpoint = serde_json::to_string(&net)?;
        }
    }

    let final_holdout = termination_bce(&net, &holdout_states, &holdout_labels, pos_weight);
    let model = TerminationModel { net, theta_term: config.theta_term, state_dim };
    model.validate()?;
    let report = TerminationTrainReport {
        initial_holdout,
        final_holdout,
        holdout_size: config.holdout,
        steps: config.steps,
        pos_weight,
        loss_curve,
    };
    Ok((model, report))
}

/// Trains β(s) from labeled segments: the final state of each segment is the
/// positive example, all other in-segment states negatives.
pub fn train_termination(
    dataset: &Dataset,
    segments: &[LabeledSegment],
    config: &TerminationConfig,
    seed: u64,
) -> Result<(TerminationModel, TerminationTrainReport)> {
    let (states, labels) = termination_examples(dataset, segments)?;
    train_termination_examples(&states, &labels, config, seed)
}

// ---------------------------------------------------------------------------
// Behavior cloning
// ---------------------------------------------------------------------------

/// Gaussian action head: an MLP mapping an input vector to
/// `[mean, log-variance]` over actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub net: MlpParams,
    pub action_dim: usize,
}

impl GaussianHead {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn mean(&self, input: &[f64]) -> Vec<f64> {
        self.net.infer(input)[..self.action_dim].to_vec()
    }

    pub fn mean_logvar(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out = self.net.infer(input);
        let mean = out[..self.action_dim].to_vec();
        let logvar = out[self.action_dim..]
            .iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        (mean, logvar)
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.output_dim() != 2 * self.action_dim {
            return Err(LokiError::InvalidArgument(
                "gaussian head must output mean and log-variance per action dim".into(),
            ));
        }
        Ok(())
    }
}

/// Skill-conditioning variant of the low-level policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// One-hot skill IDs (LOKI-O).
    OneHot,
    /// Continuous skill embeddings (LOKI-E): the segment's own embedding at
    /// train time, the library centroid at execution time.
    Embedding,
}

/// Skill-conditioned Gaussian behavior-cloning policy π(a|s,k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillPolicy {
    pub head: GaussianHead,
    pub mode: ConditioningMode,
    /// Execution-time conditioning vector per skill ID.
    pub table: Vec<Vec<f64>>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl SkillPolicy {
    pub fn skill_count(&self) -> usize {
        self.table.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.table.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.table.is_empty() {
            return Err(LokiError::InvalidArgument("policy conditioning table is empty".into()));
        }
        let cond = self.cond_dim();
        if self.table.iter().any(|v| v.len() != cond) {
            return Err(LokiError::InvalidArgument(
                "conditioning vectors have inconsistent dims".into(),
            ));
        }
        if self.head.input_dim() != self.state_dim + cond {
            return Err(LokiError::InvalidArgument(
                "policy net input must be state ++ conditioning".into(),
            ));
        }
        if self.head.action_dim != self.action_dim {
            return Err(LokiError::InvalidArgument("action dims disagree".into()));
        }
        Ok(())
    }

    fn input(&self, state: &[f64], skill: usize) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(LokiError::InvalidArgument(format!(
                "state has {} dims, policy expects {}",
                state.len(),
                self.state_dim
            )));
        }
        let cond = self.table.get(skill).ok_or_else(|| {
            LokiError::InvalidArgument(format!(
                "skill {skill} out of range ({} skills)",
                self.table.len()
            ))
        })?;
        let mut input = state.to_vec();
        input.extend_from_slice(cond);
        Ok(input)
    }
}

/// Deterministic action: the Gaussian mean for (state, skill).
pub fn policy_act(policy: &SkillPolicy, state: &[f64], skill: usize) -> Result<Vec<f64>> {
    Ok(policy.head.mean(&policy.input(state, skill)?))
}

/// Action distribution parameters for (state, skill).
pub fn policy_mean_logvar(
    policy: &SkillPolicy,
    state: &[f64],
    skill: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(policy.head.mean_logvar(&policy.input(state, skill)?))
}

/// One behavior-cloning example: a state-action pair with its skill ID and
/// source segment index.
#[derive(Debug, Clone, PartialEq)]
pub struct BcPair {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub skill: usize,
    pub task: usize,
    /// Index into the segment list the pair came from.
    pub segment: usize,
}

/// All (state, action, skill) pairs of the labeled segments.
pub fn bc_pairs(dataset: &Dataset, segments: &[LabeledSegment]) -> Result<Vec<BcPair>> {
    if segments.is_empty() {
        return Err(LokiError::InvalidArgument("no segments for behavior cloning".into()));
    }
    let mut pairs = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
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
        for t in span.start..span.end {
            pairs.push(BcPair {
                state: tr.states[t].clone(),
                action: tr.actions[t].clone(),
                skill: seg.skill_id,
                task: seg.task,
                segment: i,
            });
        }
    }
    Ok(pairs)
}

/// Behavior-cloning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear learning-rate ramp-in steps.
    pub warmup: usize,
    /// Pairs held out of training for the loss report.
    pub holdout: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            hidden: vec![64, 64],
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            warmup: 200,
            holdout: 64,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.holdout == 0 {
            return Err(LokiError::Config(
                "steps, batch_size and holdout must be >= 1".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(LokiError::Config("hidden widths must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LokiError::Config("learning_rate must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Held-out negative log-likelihoods around a behavior-cloning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcTrainReport {
    pub initial_holdout: f64,
    pub final_holdout: f64,
    pub holdout_size: usize,
    pub steps: usize,
    /// Per-step training-batch loss.
    pub loss_curve: Vec<f64>,
}

fn gaussian_nll_eval(head: &GaussianHead, inputs: &[&Vec<f64>], actions: &[&Vec<f64>]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut sum = 0.0;
    for (x, a) in inputs.iter().zip(actions) {
        let (mean, logvar) = head.mean_logvar(x);
        for d in 0..head.action_dim {
            let e = a[d] - mean[d];
            sum += 0.5 * (ln_2pi + logvar[d] + e * e * (-logvar[d]).exp());
        }
    }
    sum / inputs.len() as f64
}

/// Trains a Gaussian action head on explicit (input, action) pairs by
/// maximizing demonstration log-likelihood. Shared by the skill-conditioned
/// policy and the comparison baselines.
pub fn train_gaussian_head(
    inputs: &[Vec<f64>],
    actions: &[Vec<f64>],
    config: &BcConfig,
    seed: u64,
) -> Result<(GaussianHead, BcTrainReport)> {
    config.validate()?;
    if inputs.is_empty() || inputs.len() != actions.len() {
        return Err(LokiError::InvalidArgument(
            "behavior cloning needs matching nonempty inputs and actions".into(),
        ));
    }
    let input_dim = inputs[0].len();
    let action_dim = actions[0].len();
    if inputs.iter().any(|x| x.len() != input_dim)
        || actions.iter().any(|a| a.len() != action_dim)
    {
        return Err(LokiError::InvalidArgument("pairs have inconsistent dims".into()));
    }
    if config.holdout + 1 > inputs.len() {
        return Err(LokiError::Config(format!(
            "holdout {} leaves no training pairs out of {}",
            config.holdout,
            inputs.len()
        )));
    }

    let mut rng = chacha(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(2 * action_dim);
    let net = MlpParams::init(&dims, Activation::Tanh, Activation::Identity, &mut rng);
    let mut head = GaussianHead { net, action_dim };

    let mut index: Vec<usize> = (0..inputs.len()).collect();
    index.shuffle(&mut rng);
    let (holdout_idx, train_idx) = index.split_at(config.holdout);
    let holdout_inputs: Vec<&Vec<f64>> = holdout_idx.iter().map(|&i| &inputs[i]).collect();
    let holdout_actions: Vec<&Vec<f64>> = holdout_idx.iter().map(|&i| &actions[i]).collect();

    let initial_holdout = gaussian_nll_eval(&head, &holdout_inputs, &holdout_actions);

    let mut adam = AdamState::new(&head.net.array_lens());
    let mut checkpoint = serde_json::to_string(&head)?;
    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let adam_cfg =
            AdamConfig::with_lr(warmup_ramp(step, config.warmup) * config.learning_rate);
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| train_idx[rng.random_range(0..train_idx.len())])
            .collect();
        let result = (|| -> Result<f64> {
            let mut tape = Tape::new();
            let bound = BoundMlp::bind(&mut tape, &head.net);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = tape.constant(&inputs[i]);
                let out = forward_mlp(&mut tape, &bound, x)?;
                let mean = tape.slice(out, 0, action_dim);
                let logvar_raw = tape.slice(out, action_dim, action_dim);
                let logvar = tape.clamp(logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
                terms.push(tape.gaussian_nll(mean, logvar, &actions[i]));
            }
            let all = tape.concat(&terms);
            let sum = tape.sum(all);
            let loss = tape.scale(sum, 1.0 / batch.len() as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(LokiError::NonFinite { component: "nll".into() });
            }
            tape.backward(loss)?;
            let grads = bound.grad_refs(&tape);
            let mut arrays = head.net.arrays_mut();
            adam_step(&mut arrays, &grads, &mut adam, &adam_cfg)?;
            Ok(value)
        })();
        match result {
            Ok(value) => loss_curve.push(value),
            Err(e) if is_nonfinite_abort(&e) => {
                let component = match e {
                    LokiError::NonFinite { component } => component,
                    other => other.to_string(),
                };
                return Err(LokiError::Diverged {
                    component: format!("bc {component}"),
                    step,
                    last_checkpoint: Some(checkpoint),
                });
            }
            Err(e) => return Err(e),
        }
        if (step + 1) % CHECKPOINT_EVERY == 0 {
            checkpoint = serde_json::to_string(&head)?;
        }
    }

    let final_holdout = gaussian_nll_eval(&head, &holdout_inputs, &holdout_actions);
    let report = BcTrainReport {
        initial_holdout,
        final_holdout,
        holdout_size: config.holdout,
        steps: config.steps,
        loss_curve,
    };
    Ok((head, report))
}

/// Trains the skill-conditioned policy on all labeled-segment pairs.
///
/// One-hot mode conditions on the skill ID both at train and execution time.
/// Embedding mode conditions on the pair's own segment embedding at
/// train time (`segment_embeddings`, parallel to `segments`) and on the
/// library centroid at execution time.
pub fn train_bc(
    dataset: &Dataset,
    segments: &[LabeledSegment],
    library: &SkillLibrary,
    segment_embeddings: &[Vec<f64>],
    mode: ConditioningMode,
    config: &BcConfig,
    seed: u64,
) -> Result<(SkillPolicy, BcTrainReport)> {
    library.validate()?;
    let pairs = bc_pairs(dataset, segments)?;
    let k = library.skill_count();
    if let Some(p) = pairs.iter().find(|p| p.skill >= k) {
        return Err(LokiError::Data(format!(
            "pair references unknown skill {} ({k} skills in library)",
            p.skill
        )));
    }
    let table: Vec<Vec<f64>> = match mode {
        ConditioningMode::OneHot => (0..k).map(|i| one_hot(i, k)).collect(),
        ConditioningMode::Embedding => {
            if segment_embeddings.len() != segments.len() {
                return Err(LokiError::InvalidArgument(format!(
                    "{} embeddings for {} segments",
                    segment_embeddings.len(),
                    segments.len()
                )));
            }
            let dim = library.centroids[0].len();
            if segment_embeddings.iter().any(|e| e.len() != dim) {
                return Err(LokiError::InvalidArgument(
                    "segment embeddings must match centroid dimension".into(),
                ));
            }
            library.centroids.clone()
        }
    };
    let inputs: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            let mut x = p.state.clone();
            match mode {
                ConditioningMode::OneHot => x.extend(one_hot(p.skill, k)),
                ConditioningMode::Embedding => x.extend_from_slice(&segment_embeddings[p.segment]),
            }
            x
        })
        .collect();
    let actions: Vec<Vec<f64>> = pairs.iter().map(|p| p.action.clone()).collect();
    let (head, report) = train_gaussian_head(&inputs, &actions, config, seed)?;
    let policy = SkillPolicy {
        head,
        mode,
        table,
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
    };
    policy.validate()?;
    Ok((policy, report))
}

/// Comparison baseline: behavior cloning on states alone, no skill or task
/// conditioning.
pub fn train_unconditioned_bc(
    dataset: &Dataset,
    segments: &[LabeledSegment],
    config: &BcConfig,
    seed: u64,
) -> Result<(GaussianHead, BcTrainReport)> {
    let pairs = bc_pairs(dataset, segments)?;
    let inputs: Vec<Vec<f64>> = pairs.iter().map(|p| p.state.clone()).collect();
    let actions: Vec<Vec<f64>> = pairs.iter().map(|p| p.action.clone()).collect();
    train_gaussian_head(&inputs, &actions, config, seed)
}

/// Comparison baseline: flat task-conditioned behavior cloning — the same
/// pairs, conditioned on the task one-hot instead of the skill.
pub fn train_task_bc(
    dataset: &Dataset,
    segments: &[LabeledSegment],
    config: &BcConfig,
    seed: u64,
) -> Result<(GaussianHead, BcTrainReport)> {
    let pairs = bc_pairs(dataset, segments)?;
    let inputs: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            let mut x = p.state.clone();
            x.extend(one_hot(p.task, dataset.n_tasks));
            x
        })
        .collect();
    let actions: Vec<Vec<f64>> = pairs.iter().map(|p| p.action.clone()).collect();
    train_gaussian_head(&inputs, &actions, config, seed)
}

// ---------------------------------------------------------------------------
// Hierarchical executor
// ---------------------------------------------------------------------------

/// Executor settings: per-skill step budgets and the episode cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Step budget per skill ID; a skill never runs past its budget.
    pub timeouts: Vec<usize>,
    /// Hard cap on total environment steps.
    pub episode_cap: usize,
    /// Std of seeded Gaussian actuation noise added to executed actions
    /// (raw action units), mirroring the demonstration noise level.
    pub actuation_sigma: f64,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_cap == 0 {
            return Err(LokiError::Config("episode_cap must be >= 1".into()));
        }
        if self.timeouts.iter().any(|&t| t == 0) {
            return Err(LokiError::Config("skill timeouts must be >= 1".into()));
        }
        if !(self.actuation_sigma.is_finite() && self.actuation_sigma >= 0.0) {
            return Err(LokiError::Config("actuation_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-skill timeouts = ceil(factor × mean demo segment length of the skill).
pub fn skill_timeouts(
    segments: &[LabeledSegment],
    skill_count: usize,
    factor: f64,
) -> Result<Vec<usize>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(LokiError::InvalidArgument("timeout factor must be positive".into()));
    }
    let mut sums = vec![0usize; skill_count];
    let mut counts = vec![0usize; skill_count];
    for seg in segments {
        if seg.skill_id >= skill_count {
            return Err(LokiError::Data(format!(
                "segment references unknown skill {}",
                seg.skill_id
            )));
        }
        sums[seg.skill_id] += seg.span.len();
        counts[seg.skill_id] += 1;
    }
    (0..skill_count)
        .map(|k| {
            if counts[k] == 0 {
                return Err(LokiError::Data(format!(
                    "no demo segments for skill {k}; cannot derive a timeout"
                )));
            }
            let mean = sums[k] as f64 / counts[k] as f64;
            Ok((factor * mean).ceil() as usize)
        })
        .collect()
}

/// One hierarchical execution in the synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub task: usize,
    pub skills: Vec<usize>,
    /// Raw (unnormalized) environment states, one more than actions.
    pub states: Vec<Vec<f64>>,
    /// Raw actions applied to the environment.
    pub actions: Vec<Vec<f64>>,
    /// Total step count at which each completed skill ended; strictly
    /// ascending.
    pub switch_times: Vec<usize>,
    /// Per target fixture, whether its flag latched by episode end.
    pub subtask_success: Vec<bool>,
    pub success: bool,
}

/// Runs a task program: each skill acts with the policy mean (plus seeded
/// actuation noise) and advances when β exceeds its threshold or the skill's
/// timeout expires. Success requires every target fixture's flag to latch.
///
/// Models consume normalized states and produce normalized actions;
/// the environment runs in raw units via `stats`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    spec: &SyntheticKitchenSpec,
    stats: &NormStats,
    program: &TaskProgram,
    targets: &[usize],
    policy: &SkillPolicy,
    termination: &TerminationModel,
    config: &RolloutConfig,
    seed: u64,
) -> Result<RolloutTrace> {
    spec.validate()?;
    config.validate()?;
    policy.validate()?;
    termination.validate()?;
    if program.skills.is_empty() {
        return Err(LokiError::InvalidArgument("empty task program".into()));
    }
    if targets.iter().any(|&g| g >= spec.fixtures.len()) {
        return Err(LokiError::InvalidArgument("target fixture out of range".into()));
    }
    for &k in &program.skills {
        if k >= policy.skill_count() {
            return Err(LokiError::InvalidArgument(format!("program uses unknown skill {k}")));
        }
        if k >= config.timeouts.len() {
            return Err(LokiError::Config(format!("no timeout configured for skill {k}")));
        }
    }

    let mut rng = chacha(seed);
    let mut env = SyntheticEnv::new(spec);
    let mut trace = RolloutTrace {
        task: program.task,
        skills: program.skills.clone(),
        states: vec![env.state()],
        actions: Vec::new(),
        switch_times: Vec::new(),
        subtask_success: vec![false; targets.len()],
        success: false,
    };
    let mut total = 0usize;
    let mut truncated = false;

    'program: for &skill in &program.skills {
        let timeout = config.timeouts[skill];
        let mut in_skill = 0usize;
        loop {
            if total >= config.episode_cap {
                break 'program;
            }
            let state = stats.apply_state(&env.state());
            let mut action = stats.unapply_action(&policy_act(policy, &state, skill)?);
            for a in &mut action {
                *a += config.actuation_sigma * standard_normal(&mut rng);
            }
            if action.iter().any(|v| !v.is_finite()) {
                truncated = true;
                break 'program;
            }
            env.step(&action);
            trace.actions.push(action);
            trace.states.push(env.state());
            total += 1;
            in_skill += 1;
            if in_skill >= timeout {
                break;
            }
            let next = stats.apply_state(&env.state());
            if termination_predict(termination, &next) > termination.theta_term {
                break;
            }
        }
        trace.switch_times.push(total);
    }

    for (j, &g) in targets.iter().enumerate() {
        trace.subtask_success[j] = env.flag(g);
    }
    trace.success = !truncated && trace.subtask_success.iter().all(|&ok| ok);
    assert!(
        trace.switch_times.windows(2).all(|w| w[0] < w[1]),
        "switch times must be strictly ascending"
    );
    Ok(trace)
}

// ---------------------------------------------------------------------------
