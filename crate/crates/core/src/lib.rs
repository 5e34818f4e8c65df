//! Synthetic-attention Transformers on a small reverse-mode autodiff core.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! gradient checks and the CLI use.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod forward;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use attention::{SynthKind, SynthesizerSpec};
pub use error::{ModelError, TensorError};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type ParamStore = params::ParamStore<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type Model = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Trainer = trainer::Trainer<f64>;
