//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every op as it executes; [`Tape::backward`] walks the
//! record in reverse and returns [`Gradients`]. Parameters live in a
//! [`ParamStore`] and are bound onto a fresh tape each step.

mod grad;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tape;

pub use gradcheck::{check_gradients, check_param_gradients};
pub use nn::{attention, attention_biased, attention_weighted, causal_mask, causal_weights};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
