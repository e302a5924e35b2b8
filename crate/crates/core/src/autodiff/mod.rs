//! Minimal reverse-mode autodiff engine used by the encoder, tracker, and
//! losses. Single-threaded and deterministic: identical inputs and weights
//! produce bitwise-identical values and gradients.

pub mod adam;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use nn::{BoundParams, ParamStore};
pub use ops::concat_last;
pub use tape::{Gradients, Scalar, Tape, Value, Var};
