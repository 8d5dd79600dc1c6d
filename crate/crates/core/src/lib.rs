//! Continual-learning experiment engine for color/shape disentangled
//! convolutional networks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity, clippy::needless_range_loop)]

pub mod cli;
pub mod clreg;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod nets;
pub mod tensor;

pub use error::{Error, Result};
