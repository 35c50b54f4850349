//! Pipeline configuration: one TOML document holding every stage's
//! hyperparameters and seeds. Unknown keys are rejected; defaults are the
//! values calibrated on the synthetic benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::changepoint::{Bandwidth, PeltConfig};
use crate::dataset::SyntheticKitchenSpec;
use crate::evqvae::EvqVaeConfig;
use crate::policy::{BcConfig, TerminationConfig};
use crate::seqvae::{PeakConfig, SeqVaeConfig};
use crate::{LokiError, Result};

/// Where demonstrations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Generate the synthetic multi-task benchmark.
    Synthetic,
    /// Load a dataset JSON file from `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Dataset file for `source = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Demonstrations generated per task for `source = "synthetic"`.
    pub demos_per_task: usize,
    /// Train fraction of the fixed per-task trajectory split.
    pub split_ratio: f64,
    /// Synthetic benchmark geometry and dynamics.
    #[serde(default)]
    pub spec: SyntheticKitchenSpec,
}

/// Per-stage RNG seeds. One stage's randomness never leaks into another's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub split: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub refine: u64,
    pub stage3: u64,
    pub rollout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub evqvae: EvqVaeConfig,
    pub pelt: PeltConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    /// Sliding-window width W over transitions.
    pub window: usize,
    /// Window stride at training time (the error curve always uses 1).
    pub stride: usize,
    pub seqvae: SeqVaeConfig,
    pub peaks: PeakConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineStageConfig {
    /// Clusters for soft-split refinement.
    pub k_seg: usize,
    /// Maximum refinement rounds.
    pub r_max: usize,
    /// Intrinsic skill clusters for identity assignment.
    pub k_int: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3Config {
    pub termination: TerminationConfig,
    pub bc: BcConfig,
    /// Skill timeout = ceil(factor × mean demo segment length).
    pub timeout_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutStageConfig {
    /// Hard cap on environment steps per episode.
    pub episode_cap: usize,
    /// Seeded rollouts per task.
    pub n_rollouts: usize,
    /// Actuation noise std; defaults to the benchmark's demo noise level.
    #[serde(default)]
    pub actuation_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Boundary/termination step tolerance.
    pub tol: usize,
}

/// The full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Artifact directory; the CLI `--out` flag overrides it.
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub seeds: Seeds,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub refine: RefineStageConfig,
    pub stage3: Stage3Config,
    pub rollout: RolloutStageConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("loki-out"),
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic,
                path: None,
                demos_per_task: 24,
                split_ratio: 0.8,
                spec: SyntheticKitchenSpec::default(),
            },
            seeds: Seeds {
                dataset: 7,
                split: 0,
                stage1: 0,
                stage2: 0,
                refine: 0,
                stage3: 0,
                rollout: 0,
            },
            stage1: Stage1Config {
                evqvae: EvqVaeConfig {
                    code_dim: 8,
                    hidden: vec![32],
                    steps: 10000,
                    batch_size: 32,
                    learning_rate: 3e-3,
                    warmup: 300,
                    beta_commit: 0.25,
                    gamma_div: 0.05,
                    holdout: 64,
                },
                pelt: PeltConfig { penalty: 1.0, min_size: 10, bandwidth: Bandwidth::Median },
            },
            stage2: Stage2Config {
                window: 10,
                stride: 2,
                seqvae: SeqVaeConfig {
                    latent: 8,
                    hidden: vec![64],
                    steps: 6000,
                    batch_size: 32,
                    learning_rate: 3e-3,
                    warmup: 300,
                    alpha_kl: 0.02,
                    holdout: 64,
                },
                peaks: PeakConfig { smooth_width: 1, theta: 1.0, min_gap: 4 },
            },
            refine: RefineStageConfig { k_seg: 6, r_max: 10, k_int: 3 },
            stage3: Stage3Config {
                termination: TerminationConfig::default(),
                bc: BcConfig::default(),
                timeout_factor: 2.0,
            },
            rollout: RolloutStageConfig {
                episode_cap: 400,
                n_rollouts: 20,
                actuation_sigma: None,
            },
            eval: EvalConfig { tol: 4 },
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML config file; unknown keys and schema violations fail
    /// before any compute.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| LokiError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source {
            DatasetSource::File if self.dataset.path.is_none() => {
                return Err(LokiError::Config("dataset.source = \"file\" needs a path".into()));
            }
            DatasetSource::Synthetic => {
                self.dataset.spec.validate()?;
                if self.dataset.demos_per_task == 0 {
                    return Err(LokiError::Config("demos_per_task must be >= 1".into()));
                }
            }
            _ => {}
        }
        if !(self.dataset.split_ratio > 0.0 && self.dataset.split_ratio < 1.0) {
            return Err(LokiError::Config("split_ratio must lie in (0, 1)".into()));
        }
        self.stage1.evqvae.validate()?;
        self.stage1.pelt.validate()?;
        if self.stage2.window < 2 || self.stage2.stride == 0 {
            return Err(LokiError::Config("stage2 window must be >= 2, stride >= 1".into()));
        }
        self.stage2.seqvae.validate()?;
        if self.refine.k_seg == 0 || self.refine.r_max == 0 || self.refine.k_int == 0 {
            return Err(LokiError::Config("k_seg, r_max and k_int must be >= 1".into()));
        }
        self.stage3.termination.validate()?;
        self.stage3.bc.validate()?;
        if !(self.stage3.timeout_factor.is_finite() && self.stage3.timeout_factor > 0.0) {
            return Err(LokiError::Config("timeout_factor must be positive".into()));
        }
        if self.rollout.episode_cap == 0 || self.rollout.n_rollouts == 0 {
            return Err(LokiError::Config("episode_cap and n_rollouts must be >= 1".into()));
        }
        if let Some(s) = self.rollout.actuation_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(LokiError::Config("actuation_sigma must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized config; artifacts embed it and
    /// loading checks it, so artifacts from different configs never mix.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Re-seeds every stage from one master seed (the CLI `--seed` flag):
    /// stage seeds become `master + fixed offset`.
    pub fn apply_master_seed(&mut self, master: u64) {
        self.seeds = Seeds {
            dataset: master,
            split: master.wrapping_add(1),
            stage1: master.wrapping_add(2),
            stage2: master.wrapping_add(3),
            refine: master.wrapping_add(4),
            stage3: master.wrapping_add(5),
            rollout: master.wrapping_add(6),
        };
    }

    /// Rollout actuation noise: explicit value or the benchmark's demo noise.
    pub fn actuation_sigma(&self) -> f64 {
        self.rollout.actuation_sigma.unwrap_or(self.dataset.spec.noise_sigma)
    }
}
