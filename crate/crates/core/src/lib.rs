//! Cycle-consistent convolutional transformers (CyTran) for translating CT
//! slices between contrast phases, plus a translate-then-register pipeline
//! built on a recursive registration cascade.
//!
//! Everything runs on the in-crate [`tensor`] engine: dense tensors with a
//! reverse-mode autodiff tape and a finite-difference gradient checker.

pub mod container;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod registration;
pub mod selfcheck;
pub mod tensor;
pub mod training;
pub mod translate;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
