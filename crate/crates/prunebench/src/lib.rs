//! A laboratory for measuring how pruning affects adversarial robustness.
//!
//! The crate trains a small convolutional classifier on its own
//! reverse-mode autodiff tape, prunes it with nine structure/criterion/
//! scope combinations over an iterative halving schedule, attacks every
//! resulting model with L0, L2, and L-infinity attacks, and emits
//! robustness and margin reports.

pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod pruning;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
