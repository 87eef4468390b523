//! Differentially private optimization by gradient embedding perturbation.
//!
//! * [`linalg`]: dense kernels (subspace iteration, Gram–Schmidt, projection,
//!   clipping, stable rank, seeded Gaussian noise)
//! * [`accountant`]: Rényi-DP costs, composition, conversion and calibration
//! * [`models`]: per-sample gradients for small models, parameter groups
//! * [`mechanism`]: anchor bases and the GEP / B-GEP / GP releases
//! * [`trainer`]: the private training loop
//! * [`synth`]: seeded synthetic datasets
//! * [`experiments`]: utility comparisons against a non-private optimum

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mechanism;
pub mod models;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
