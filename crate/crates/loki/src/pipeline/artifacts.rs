//! Artifact persistence with provenance. Every stage output is a JSON file
//! wrapping the payload with the producing config's hash and the stage seed;
//! loading verifies the hash so artifacts from different configurations can
//! never be mixed, and a stage whose artifact already matches is skipped.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{LokiError, Result};

/// A stage output plus the provenance needed to trust it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact<T> {
    /// Hash of the pipeline config that produced the payload.
    pub config_hash: String,
    /// Seed the producing stage ran with.
    pub seed: u64,
    pub payload: T,
}

/// Canonical artifact file names, one per stage output.
pub mod files {
    pub const DATASET: &str = "dataset.json";
    pub const STAGE1_MODEL: &str = "stage1_model.json";
    pub const STAGE1_SEGMENTS: &str = "stage1_segments.json";
    pub const STAGE2_MODEL: &str = "stage2_model.json";
    pub const STAGE2_SEGMENTS: &str = "stage2_segments.json";
    pub const REFINED: &str = "refined.json";
    pub const ALIGNED: &str = "aligned.json";
    pub const TERMINATION: &str = "termination.json";
    pub const POLICIES: &str = "policies.json";
    pub const EVALUATION: &str = "evaluation.json";
    pub const ROLLOUTS: &str = "rollouts.json";
    pub const REPORT: &str = "report.txt";
    pub const CSV_DIR: &str = "csv";
    pub const PLOT_DIR: &str = "plots";
}

/// Writes `payload` to `<out>/<name>` wrapped with provenance.
pub fn save_artifact<T: Serialize>(
    out: &Path,
    name: &str,
    config_hash: &str,
    seed: u64,
    payload: &T,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let artifact =
        Artifact { config_hash: config_hash.to_string(), seed, payload };
    let path = out.join(name);
    let json = serde_json::to_string(&artifact)?;
    std::fs::write(&path, json)?;
    Ok(path)
}

/// Loads `<out>/<name>`, verifying it was produced by `config_hash`.
pub fn load_artifact<T: DeserializeOwned>(
    out: &Path,
    name: &str,
    config_hash: &str,
) -> Result<Artifact<T>> {
    let path = out.join(name);
    if !path.is_file() {
        return Err(LokiError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(&path)?;
    let artifact: Artifact<T> = serde_json::from_str(&text)?;
    if artifact.config_hash != config_hash {
        return Err(LokiError::ProvenanceMismatch(format!(
            "{} was produced by config {} but the current config is {}",
            path.display(),
            &artifact.config_hash[..12.min(artifact.config_hash.len())],
            &config_hash[..12.min(config_hash.len())],
        )));
    }
    Ok(artifact)
}

/// True when `<out>/<name>` exists and carries the expected provenance; used
/// to make re-running a stage a no-op.
pub fn artifact_matches(out: &Path, name: &str, config_hash: &str, seed: u64) -> bool {
    let path = out.join(name);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return false;
    };
    #[derive(Deserialize)]
    struct Head {
        config_hash: String,
        seed: u64,
    }
    match serde_json::from_str::<Head>(&text) {
        Ok(head) => head.config_hash == config_hash && head.seed == seed,
        Err(_) => false,
    }
}
