//! Delayed SGD on quadratic least squares: simulation, empirical stability,
//! generating-function coefficients and closed-form generalization bounds.
//!
//! Module map:
//! - [`dataset`]: LIBSVM I/O, seeded splits, synthetic data with controlled spectra.
//! - [`problem`]: the quadratic empirical risk as an implicit operator.
//! - [`engine`]: delayed SGD (fixed or bounded random delay) and coupled twin runs.
//! - [`genfun`]: coefficients of `(I - I x + eta A x^(tau+1))^-1` per eigenvalue.
//! - [`bounds`]: closed-form stability / generalization bounds.
//! - [`harness`]: experiment configs, sweeps, stability estimation, CSV/JSON output.

pub mod bounds;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod genfun;
pub mod harness;
pub mod problem;

pub use error::{Error, Result};
