//! Encoder-decoder transformer with a reverse-mode tape.
//!
//! Post-norm layers, fixed sinusoidal positions, one embedding table shared by encoder
//! and decoder inputs, and an untied output projection. Everything is generic over the
//! float type so training can run in `f32` while gradient checks run in `f64`.

mod checkpoint;
mod config;
pub(crate) mod forward;
mod params;
mod tape;

pub use checkpoint::{Container, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Mode};
pub use forward::{
    attention_scores, forward, forward_batch, log_softmax_row, softmax_with_temperature,
    ForwardOptions, ForwardPass, ForwardTrace, PaddedBatch, TraceGrad,
};
pub use params::{init_parameters, Gradients, Parameters, TensorSpec};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating point element type of parameters and activations.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
