//! Trend filtering under a misspecified total-variation order.
//!
//! The crate has three layers:
//!
//! * exact function algebra — [`pwpoly`] (piecewise polynomials), [`kernel`]
//!   (compactly supported higher-order kernels and closed-form convolution)
//!   and [`tv`] (exact kth-order total variation);
//! * the discrete estimator — [`solver`] solves the penalized least-squares
//!   problem with an operator-splitting method, certified by a subgradient
//!   optimality gap, with an independent coordinate-descent reference;
//! * rate machinery — [`oracle`] builds convolution approximants and evaluates
//!   bandwidth/penalty schedules and theoretical MSE exponents, and
//!   [`experiments`] runs seeded Monte Carlo grids and fits empirical
//!   convergence rates.

pub mod error;
pub mod experiments;
pub mod kernel;
pub mod oracle;
pub mod pwpoly;
pub mod rng;
pub mod solver;
pub mod tv;

pub use error::{Error, Result};
