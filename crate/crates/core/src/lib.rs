//! Hard-attention video classification.
//!
//! A small dueling Q-network watches a downsampled view of a video clip and
//! chooses, step by step, either to zoom into one of a fixed set of prior
//! regions or to commit to a class. Zooming re-crops the original
//! full-resolution clip, so the final decision can rest on detail the first
//! glance never saw. Training is plain Q-learning with a replay buffer,
//! reward-sparsity-aware sampling, and known-value injection for terminal
//! classify actions.
//!
//! The crate ships the whole loop: deterministic synthetic corpus
//! generation, a TV-L1 optical flow stream, the network and its hand-written
//! gradients, the environment, the trainer, and evaluation tooling behind
//! the `ssha` binary.

pub mod clip;
pub mod container;
pub mod env;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geom;
pub mod qnet;
pub mod rng;
pub mod synth;
pub mod tabular;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
