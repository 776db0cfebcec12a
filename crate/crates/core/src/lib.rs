//! Gated cross-modal fusion for utterance-level multimodal sentiment
//! classification, with the reverse-mode autodiff, training loop and
//! synthetic data needed to train and verify it at desk scale.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below name the double-precision instantiations used for training.

pub mod data;
pub mod layers;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor, TensorError};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
