//! Multi-source student–teacher domain adaptation: a small laboratory.

// `!(x >= 0.0)` is used on purpose: it rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod datasets;
pub mod must;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod rv;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
