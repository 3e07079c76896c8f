//! Neural-operator data assimilation for semilinear PDEs.
//!
//! A learned Fourier neural operator advances the state one observation
//! interval at a time; a learned observer gain pulls the forecast towards
//! noisy partial measurements whenever they arrive.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod assimilation;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod operator;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
