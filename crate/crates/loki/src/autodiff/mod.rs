//! Minimal reverse-mode autodiff: tape, dense networks, Adam.
//!
//! All values are `f64`. Each training step builds a fresh [`Tape`], binds
//! model parameters as leaves, accumulates a scalar loss over the batch,
//! runs [`Tape::backward`], and applies [`adam_step`] to the flat parameter
//! arrays. Everything is deterministic given the seed.

mod mlp;
mod optim;
mod tape;

pub use mlp::{forward_mlp, BoundMlp, LayerParams, MlpParams};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{sigmoid, Activation, Tape, Var};
