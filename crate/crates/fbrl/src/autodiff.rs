//! Minimal dense-tensor reverse-mode autodiff and the Adam optimizer.

pub mod adam;
pub mod tape;

pub use adam::Adam;
pub use tape::{AdError, AdResult, Tape, Tensor, Var};
