//! Negative distillation for single-turn dialogue generation.
//!
//! The crate is organised along the training pipeline:
//!
//! - [`corpus`]: tokenisation, vocabulary, source entropy and the entropy-ranked split
//!   that produces the negative training set.
//! - [`model`]: a small encoder-decoder transformer with a tape-based reverse pass whose
//!   forward trace exposes logits, decoder hidden states and pre-softmax attention scores.
//! - [`losses`]: MLE, unlikelihood, knowledge distillation, the negative distillation
//!   objectives and the progressive mixing schedule.
//! - [`training`]: Adam with inverse-square-root warm-up, teacher training and student
//!   distillation loops, run configuration and logs.
//! - [`decoding`]: greedy and length-penalised beam search.
//! - [`metrics`]: Dist-n, low-frequency ratio, n-gram KL and smoothed sentence BLEU.
//! - [`synth`]: a deterministic many-to-one corpus generator for desk-scale experiments.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
