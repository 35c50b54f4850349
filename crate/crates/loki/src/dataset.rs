//! Trajectory data: synthetic multi-task benchmark, JSONL I/O, normalization.
//!
//! The synthetic environment is a 2-D point agent among `G` fixtures. The
//! state is `[x, y, f_1..f_G]`, the action a 2-D velocity, and a fixture
//! toggles once the agent has stayed inside the toggle radius for
//! `dwell_steps` consecutive steps. Flag dim `g` pulses to 1 in the single
//! state recorded at fixture g's toggle step and is 0 everywhere else, so
//! states on task-shared legs look alike across tasks. Each task visits the
//! three shared fixtures plus one task-unique fixture in a fixed order;
//! demonstrations come from a noisy proportional controller. Ground-truth
//! boundaries are recorded at toggle steps for evaluation only; the
//! discovery stages never read them.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{chacha, standard_normal};
use crate::{LokiError, Result};

/// One demonstration. `states` has one more entry than `actions`; transition
/// `t` is `(states[t], actions[t], states[t+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Ascending subtask end indices in transition coordinates, final entry
    /// equal to the trajectory length. Evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boundaries: Option<Vec<usize>>,
}

/// Borrowed view of one transition.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub next_state: &'a [f64],
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transition(&self, t: usize) -> Transition<'_> {
        Transition {
            state: &self.states[t],
            action: &self.actions[t],
            next_state: &self.states[t + 1],
        }
    }

    fn validate(&self, record: usize) -> Result<()> {
        let fail = |message: String| LokiError::Parse { record, message };
        if self.states.len() != self.actions.len() + 1 {
            return Err(fail(format!(
                "expected one more state than actions, got {} states / {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.actions.is_empty() {
            return Err(fail("empty trajectory".into()));
        }
        let sd = self.states[0].len();
        let ad = self.actions[0].len();
        for (i, s) in self.states.iter().enumerate() {
            if s.len() != sd {
                return Err(fail(format!("state {i} has dim {} (expected {sd})", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite value in state {i}")));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.len() != ad {
                return Err(fail(format!("action {i} has dim {} (expected {ad})", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite value in action {i}")));
            }
        }
        if let Some(b) = &self.gt_boundaries {
            let t_len = self.len();
            let ascending = b.windows(2).all(|w| w[0] < w[1]);
            if b.is_empty() || !ascending || *b.last().unwrap() != t_len || b[0] == 0 {
                return Err(fail(format!(
                    "gt_boundaries must be strictly ascending in (0, {t_len}] ending at {t_len}, got {b:?}"
                )));
            }
        }
        Ok(())
    }
}

/// A set of trajectories with consistent dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_tasks: usize,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(LokiError::Data("dataset has no trajectories".into()));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            tr.validate(i)?;
        }
        let state_dim = trajectories[0].states[0].len();
        let action_dim = trajectories[0].actions[0].len();
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.states[0].len() != state_dim || tr.actions[0].len() != action_dim {
                return Err(LokiError::Data(format!(
                    "trajectory {i} dims ({}, {}) differ from ({state_dim}, {action_dim})",
                    tr.states[0].len(),
                    tr.actions[0].len()
                )));
            }
        }
        let n_tasks = trajectories.iter().map(|t| t.task).max().unwrap() + 1;
        Ok(Dataset { trajectories, state_dim, action_dim, n_tasks })
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

/// Geometry and dynamics of the synthetic multi-task benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticKitchenSpec {
    /// Fixture positions; flags extend the state by one dim each.
    pub fixtures: Vec<[f64; 2]>,
    /// Fixture visit order per task.
    pub tasks: Vec<Vec<usize>>,
    pub start: [f64; 2],
    pub toggle_radius: f64,
    /// Consecutive in-radius steps required to flip a flag.
    pub dwell_steps: usize,
    /// Proportional controller gain used by the scripted demonstrator.
    pub gain: f64,
    /// Controller speed clip (per-step displacement bound before noise).
    pub max_speed: f64,
    /// Std of the Gaussian noise added to demonstrator actions.
    pub noise_sigma: f64,
    /// Hard cap on generated episode length.
    pub max_episode_steps: usize,
}

impl Default for SyntheticKitchenSpec {
    fn default() -> Self {
        // Three shared fixtures on a radius-2 triangle, one satellite fixture
        // 1.4 outward of each shared one, and one unused spare. Each task
        // interleaves its satellite at a different position so trajectories
        // alternate shared and task-unique subtasks. The controller crosses
        // between fixtures in a handful of steps and then dwells, so most
        // transitions of a subtask sit at its fixture; per-subtask statistics
        // are dominated by the dwell rather than the approach path.
        let deg = |d: f64| d.to_radians();
        let at = |r: f64, ang: f64| [r * ang.cos(), r * ang.sin()];
        SyntheticKitchenSpec {
            fixtures: vec![
                at(2.0, deg(90.0)),
                at(2.0, deg(210.0)),
                at(2.0, deg(330.0)),
                at(3.4, deg(90.0)),
                at(3.4, deg(210.0)),
                at(3.4, deg(330.0)),
                [5.0, 5.0],
            ],
            tasks: vec![vec![0, 3, 1, 2], vec![0, 1, 4, 2], vec![0, 1, 2, 5]],
            start: [0.0, 0.0],
            toggle_radius: 0.25,
            dwell_steps: 10,
            gain: 0.9,
            max_speed: 0.8,
            noise_sigma: 0.01,
            max_episode_steps: 400,
        }
    }
}

/// Intrinsic/extrinsic tag of a subtask or macro segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentTag {
    Intrinsic,
    Extrinsic,
}

impl SyntheticKitchenSpec {
    pub fn state_dim(&self) -> usize {
        2 + self.fixtures.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixtures.is_empty() || self.tasks.is_empty() {
            return Err(LokiError::Config("benchmark needs fixtures and tasks".into()));
        }
        for (c, order) in self.tasks.iter().enumerate() {
            if order.is_empty() {
                return Err(LokiError::Config(format!("task {c} visits no fixtures")));
            }
            for &g in order {
                if g >= self.fixtures.len() {
                    return Err(LokiError::Config(format!("task {c} references fixture {g}")));
                }
            }
            let mut seen = vec![false; self.fixtures.len()];
            for &g in order {
                if seen[g] {
                    return Err(LokiError::Config(format!("task {c} visits fixture {g} twice")));
                }
                seen[g] = true;
            }
        }
        if !(self.toggle_radius > 0.0 && self.gain > 0.0 && self.max_speed > 0.0) {
            return Err(LokiError::Config("radius, gain and max_speed must be positive".into()));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(LokiError::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.dwell_steps == 0 || self.max_episode_steps == 0 {
            return Err(LokiError::Config("dwell_steps and max_episode_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Fixtures visited by every task.
    pub fn intrinsic_fixtures(&self) -> Vec<usize> {
        (0..self.fixtures.len())
            .filter(|g| self.tasks.iter().all(|order| order.contains(g)))
            .collect()
    }

    /// Per-subtask tags for one task.
    pub fn subtask_tags(&self, task: usize) -> Vec<SegmentTag> {
        let intrinsic = self.intrinsic_fixtures();
        self.tasks[task]
            .iter()
            .map(|g| {
                if intrinsic.contains(g) {
                    SegmentTag::Intrinsic
                } else {
                    SegmentTag::Extrinsic
                }
            })
            .collect()
    }

    /// Interior ground-truth boundaries of the intrinsic/extrinsic
    /// alternation: subtask boundaries where the tag changes.
    pub fn macro_gt_boundaries(&self, task: usize, gt_boundaries: &[usize]) -> Vec<usize> {
        let tags = self.subtask_tags(task);
        let mut out = Vec::new();
        for j in 0..tags.len().saturating_sub(1) {
            if tags[j] != tags[j + 1] {
                out.push(gt_boundaries[j]);
            }
        }
        out
    }
}

/// Synthetic environment with per-fixture dwell tracking.
///
/// Toggles are latched internally, but the observed state carries them only
/// as one-step pulses: flag dim g is 1 exactly in the state recorded at the
/// toggle step and 0 otherwise. Persistent flags would identify the task on
/// every shared leg (each task reaches a shared fixture with a different
/// completion pattern), destroying the cross-task ambiguity that the macro
/// stage's entropy signal relies on.
pub struct SyntheticEnv<'a> {
    spec: &'a SyntheticKitchenSpec,
    pos: [f64; 2],
    latched: Vec<bool>,
    pulses: Vec<f64>,
    dwell: Vec<usize>,
    steps: usize,
    /// (fixture, transition index at which the pulse became visible).
    pub toggle_events: Vec<(usize, usize)>,
}

impl<'a> SyntheticEnv<'a> {
    pub fn new(spec: &'a SyntheticKitchenSpec) -> Self {
        SyntheticEnv {
            spec,
            pos: spec.start,
            latched: vec![false; spec.fixtures.len()],
            pulses: vec![0.0; spec.fixtures.len()],
            dwell: vec![0; spec.fixtures.len()],
            steps: 0,
            toggle_events: Vec::new(),
        }
    }

    pub fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.spec.state_dim());
        s.push(self.pos[0]);
        s.push(self.pos[1]);
        s.extend_from_slice(&self.pulses);
        s
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Whether the fixture has ever toggled (latched, not the pulse).
    pub fn flag(&self, fixture: usize) -> bool {
        self.latched[fixture]
    }

    /// Applies a velocity action and updates toggles.
    pub fn step(&mut self, action: &[f64]) {
        self.pos[0] += action[0];
        self.pos[1] += action[1];
        self.steps += 1;
        for p in &mut self.pulses {
            *p = 0.0;
        }
        for (g, f) in self.spec.fixtures.iter().enumerate() {
            let d = ((self.pos[0] - f[0]).powi(2) + (self.pos[1] - f[1]).powi(2)).sqrt();
            if d <= self.spec.toggle_radius {
                self.dwell[g] += 1;
            } else {
                self.dwell[g] = 0;
            }
            if !self.latched[g] && self.dwell[g] >= self.spec.dwell_steps {
                self.latched[g] = true;
                self.pulses[g] = 1.0;
                self.toggle_events.push((g, self.steps));
            }
        }
    }
}

/// Scripted demonstrator action toward `target` (before noise).
pub fn controller_action(spec: &SyntheticKitchenSpec, pos: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    let mut v = [spec.gain * (target[0] - pos[0]), spec.gain * (target[1] - pos[1])];
    let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if norm > spec.max_speed {
        let k = spec.max_speed / norm;
        v[0] *= k;
        v[1] *= k;
    }
    v
}

/// Generates `demos_per_task` noisy scripted demonstrations per task.
pub fn generate_synthetic(
    spec: &SyntheticKitchenSpec,
    demos_per_task: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if demos_per_task == 0 {
        return Err(LokiError::InvalidArgument("demos_per_task must be >= 1".into()));
    }
    let mut rng = chacha(seed);
    let mut trajectories = Vec::with_capacity(spec.tasks.len() * demos_per_task);
    for task in 0..spec.tasks.len() {
        for demo in 0..demos_per_task {
            let tr = generate_demo(spec, task, &mut rng).map_err(|e| {
                LokiError::Data(format!("task {task} demo {demo}: {e}"))
            })?;
            trajectories.push(tr);
        }
    }
    Dataset::new(trajectories)
}

fn generate_demo(
    spec: &SyntheticKitchenSpec,
    task: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Trajectory> {
    let mut env = SyntheticEnv::new(spec);
    let mut states = vec![env.state()];
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut boundaries = Vec::new();
    for &g in &spec.tasks[task] {
        if env.flag(g) {
            return Err(LokiError::Data(format!("fixture {g} toggled before its subtask")));
        }
        while !env.flag(g) {
            if env.steps() >= spec.max_episode_steps {
                return Err(LokiError::Data(format!(
                    "episode exceeded {} steps pursuing fixture {g}",
                    spec.max_episode_steps
                )));
            }
            let pos = [states.last().unwrap()[0], states.last().unwrap()[1]];
            let ctrl = controller_action(spec, pos, spec.fixtures[g]);
            let a = [
                ctrl[0] + spec.noise_sigma * standard_normal(rng),
                ctrl[1] + spec.noise_sigma * standard_normal(rng),
            ];
            env.step(&a);
            actions.push(a.to_vec());
            states.push(env.state());
        }
        boundaries.push(env.steps());
    }
    Ok(Trajectory { task, states, actions, gt_boundaries: Some(boundaries) })
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

/// Writes one JSON record per line.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for tr in &dataset.trajectories {
        serde_json::to_writer(&mut out, tr)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a line-delimited JSON trajectory file; errors carry the offending
/// record index.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| {
        LokiError::Data(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut trajectories = Vec::new();
    for (record, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tr: Trajectory = serde_json::from_str(&line).map_err(|e| LokiError::Parse {
            record,
            message: e.to_string(),
        })?;
        tr.validate(record)?;
        trajectories.push(tr);
    }
    Dataset::new(trajectories)
}

// ---------------------------------------------------------------------------
// Normalization and splits
// ---------------------------------------------------------------------------

/// Per-dimension affine normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Fits zero-mean/unit-variance stats on every state and action in
    /// `dataset`, flooring denominators at 1e-8.
    pub fn fit(dataset: &Dataset) -> NormStats {
        let fit_dims = |vectors: &mut dyn Iterator<Item = &Vec<f64>>, dim: usize| {
            let mut mean = vec![0.0; dim];
            let mut count = 0usize;
            let mut all: Vec<&Vec<f64>> = Vec::new();
            for v in vectors {
                for d in 0..dim {
                    mean[d] += v[d];
                }
                count += 1;
                all.push(v);
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            let mut var = vec![0.0; dim];
            for v in &all {
                for d in 0..dim {
                    let c = v[d] - mean[d];
                    var[d] += c * c;
                }
            }
            let std = var
                .iter()
                .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
                .collect();
            (mean, std)
        };
        let (state_mean, state_std) = fit_dims(
            &mut dataset.trajectories.iter().flat_map(|t| t.states.iter()),
            dataset.state_dim,
        );
        let (action_mean, action_std) = fit_dims(
            &mut dataset.trajectories.iter().flat_map(|t| t.actions.iter()),
            dataset.action_dim,
        );
        NormStats { state_mean, state_std, action_mean, action_std }
    }

    pub fn apply_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&v, (&m, &sd))| (v - m) / sd)
            .collect()
    }

    pub fn apply_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_mean.iter().zip(&self.action_std))
            .map(|(&v, (&m, &sd))| (v - m) / sd)
            .collect()
    }

    pub fn unapply_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_mean.iter().zip(&self.action_std))
            .map(|(&v, (&m, &sd))| v * sd + m)
            .collect()
    }

    pub fn unapply_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&v, (&m, &sd))| v * sd + m)
            .collect()
    }

    /// Normalizes every state and action of a dataset.
    pub fn apply_dataset(&self, dataset: &Dataset) -> Dataset {
        let trajectories = dataset
            .trajectories
            .iter()
            .map(|tr| Trajectory {
                task: tr.task,
                states: tr.states.iter().map(|s| self.apply_state(s)).collect(),
                actions: tr.actions.iter().map(|a| self.apply_action(a)).collect(),
                gt_boundaries: tr.gt_boundaries.clone(),
            })
            .collect();
        Dataset { trajectories, ..dataset.clone() }
    }
}

/// Fits stats on `dataset` and returns the normalized copy with them.
pub fn normalize(dataset: &Dataset) -> (Dataset, NormStats) {
    let stats = NormStats::fit(dataset);
    (stats.apply_dataset(dataset), stats)
}

/// Deterministic per-task 80/20-style split. Returns (train, test)
/// trajectory indices; every task keeps at least one trajectory per side
/// when it has two or more.
pub fn train_test_split(dataset: &Dataset, train_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = chacha(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for task in 0..dataset.n_tasks {
        let mut idx: Vec<usize> = (0..dataset.trajectories.len())
            .filter(|&i| dataset.trajectories[i].task == task)
            .collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = if n < 2 {
            n
        } else {
            ((n as f64 * train_ratio).floor() as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
