//! Inverse-free sparse variational Gaussian processes.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod data_io;
pub mod error;
pub mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod natgrad;
pub mod params;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
