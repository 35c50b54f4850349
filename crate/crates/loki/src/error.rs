//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library and mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum LokiError {
    /// Invalid argument or precondition violation at an API boundary.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration failed schema validation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A record in a trajectory file failed to parse.
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    /// Training aborted on a non-finite loss. Carries the last finite
    /// parameter snapshot serialized as a checkpoint document, if any.
    #[error("{component} diverged at step {step}")]
    Diverged {
        component: String,
        step: usize,
        last_checkpoint: Option<String>,
    },

    /// A loss component evaluated to NaN or infinity.
    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    /// A stage was invoked before its upstream artifact exists.
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    /// Artifacts produced under different configs or seeds were mixed.
    #[error("artifact provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    /// Canonical-sequence alignment could not reach the target length.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A pipeline stage failed; wraps the cause for exit-code mapping.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<LokiError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for LokiError {
    fn from(e: serde_json::Error) -> Self {
        LokiError::Serialization(e.to_string())
    }
}
