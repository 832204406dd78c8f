//! Dynamic visual tokenization and unified image/text language modelling at
//! desk scale.
//!
//! The crate is generic over the element type through [`Scalar`]; training
//! code runs in `f32`, while gradient checks instantiate the same models in
//! `f64`. The aliases below name the common instantiations.

pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod lm;
pub mod persist;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
