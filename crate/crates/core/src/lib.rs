//! Speech-text layer-dimension mapping on a decoder-only transformer: CTC-trained
//! bottom speech layers, a core language model over vision/speech/text context,
//! and top speech layers that stream units alongside generated text.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
mod scalar;
pub mod streaming;
pub mod training;
pub mod vocab;

pub use error::{OmniError, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Model32 = model::OmniModel<f32>;
pub type Model64 = model::OmniModel<f64>;
