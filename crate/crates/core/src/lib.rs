//! Layer-wise quantification of private-information leakage from
//! neural-network gradients.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod error;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tensor};
