//! Desk-scale laboratory for parameter-efficient tuning of a frozen
//! Transformer speech encoder on speaker verification.
//!
//! The crate is organized around the data flow of a run: synthetic corpus
//! generation ([`data`]), a frozen convolutional + Transformer backbone
//! ([`backbone`]), parameter-efficient tuning strategies and their gated
//! unification ([`pet`]), a speaker-verification head ([`sv`]), trial scoring
//! and metrics ([`metrics`]), all driven by the training harness ([`train`]).
//! Everything differentiable runs on the tape engine in [`tensor`].

pub mod backbone;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pet;
pub mod sv;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::tape::{Activation, Grads, Tape, Var};
pub use tensor::{Dtype, Scalar, Tensor};
