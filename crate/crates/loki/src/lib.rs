//! Offline hierarchical skill discovery and option-style policy learning.
//!
//! The library implements a three-stage pipeline over unsegmented, multi-task
//! demonstration data:
//!
//! 1. **Macro segmentation** — a task-conditionally quantized VQ-VAE is trained
//!    on single transitions; the entropy of its soft codebook assignment is low
//!    on task-specific (extrinsic) spans and high on task-shared (intrinsic)
//!    spans, and penalized kernel change-point detection on the log-entropy
//!    trace yields macro boundaries with intrinsic/extrinsic tags.
//! 2. **Micro segmentation** — a sequential VAE over sliding windows produces
//!    per-timestep reconstruction-error curves whose curvature peaks propose
//!    candidate subtask splits; iterative cluster-merge refinement and
//!    canonical-sequence force-alignment turn them into consistent per-task
//!    skill segmentations with a shared skill library.
//! 3. **Policy learning** — a termination classifier and skill-conditioned
//!    Gaussian behavior-cloning policies (one-hot or embedding conditioned)
//!    are trained on the labeled segments and executed option-style against
//!    a task program.
//!
//! The `dataset` module ships a synthetic multi-task benchmark with ground
//! truth boundaries used only for evaluation; the `pipeline` module and the
//! `loki` binary orchestrate the stages over on-disk artifacts.

pub mod autodiff;
pub mod changepoint;
pub mod dataset;
pub mod error;
pub mod evqvae;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod refine;
pub mod rng;
pub mod seqvae;

pub use error::LokiError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LokiError>;

/// One-hot encoding of `index` into a vector of length `len`.
pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}
