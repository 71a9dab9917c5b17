//! Semiparametric estimation for partially linear single-index models with
//! longitudinal data:
//!
//! ```text
//! Y_ij = Z_ij' beta + eta(X_ij' theta) + e_ij,   ||theta|| = 1, theta_1 > 0
//! ```
//!
//! `beta` and `theta` are estimated by profile least squares ([`puls`]) and
//! then by estimating equations weighted by an estimated working covariance
//! ([`sgee`], [`covariance`]). [`pipeline`] chains the stages.

// `!(x > 0.0)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod covariance;
pub mod data;
pub mod dogleg;
pub mod error;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod montecarlo;
pub mod optim;
pub mod pipeline;
pub mod puls;
pub mod sgee;

pub use error::{Error, Result};
