//! Multiscale collaborative deep sequence-to-sequence models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: a dense row-major tensor type and a reverse-mode
//!   autodiff tape, generic over the floating-point scalar.
//! - [`nn`]: attention, feed-forward, GRU cell, embeddings, dropout.
//! - [`model`]: encoder/decoder assembly in four modes (baseline pre-norm,
//!   plain deep stacking, block-scale collaboration, full multiscale
//!   collaboration with contextual states and gated feature fusion).
//! - [`train`]: label-smoothed cross entropy, Adam with the inverse-sqrt
//!   warmup schedule, L2 regularization of encoder weights, checkpointing
//!   and checkpoint averaging, and the training loop.
//! - [`decode`]: greedy and length-penalized beam search.
//! - [`analysis`]: per-layer gradient-norm tracing, per-consumer gradient
//!   path decomposition, sentence difficulty scoring and test splitting,
//!   attention-weight export, corpus BLEU.
//! - [`data`]: synthetic sequence tasks, vocabulary, token-bucket batching.
//!
//! The math core is scalar-generic; the aliases below pin the `f64`
//! instantiation used by training and analysis (64-bit keeps the
//! finite-difference gradient checks tight; checkpoints store 32-bit).

pub mod analysis;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{GateId, Mask, Var};

/// Dense tensor at working precision.
pub type Tensor = tensor::Tensor<f64>;
/// Autodiff tape at working precision.
pub type Tape = tape::Tape<f64>;
/// Single-precision tensor (checkpoint storage width).
pub type Tensor32 = tensor::Tensor<f32>;
