//! Finite-N estimators and limit objects for the sparse two-community
//! stochastic block model.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod free_energy;
pub mod hj;
pub mod inference;
pub mod kernel;
pub mod limit;
pub mod measures;
pub mod model;
pub mod registry;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use kernel::ModelParams;
pub use measures::AtomicMeasure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
