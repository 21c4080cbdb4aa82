//! Residual-quantized motion tokens with masked and residual transformers.
//!
//! The numeric core is generic over [`Scalar`]; production code runs on the
//! `f32` aliases below, gradient checks instantiate the same code at `f64`.

pub mod codec;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod mformer;
pub mod ndmath;
pub mod nn;
pub mod rformer;
pub mod rvq;
pub mod schedule;
pub mod toolkit;

pub use error::{Error, Result};
pub use ndmath::Scalar;

pub type Array = ndmath::Tensor<f32>;
pub type Tape = ndmath::Tape<f32>;
