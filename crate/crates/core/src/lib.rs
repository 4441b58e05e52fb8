//! Empirical Bayes predictive density estimation for linear mixed models
//! under covariate shift.
//!
//! The pipeline: simulate (or load) a past/future design, reduce the past
//! responses to per-unit sufficient statistics, estimate the predictive KL
//! risk of a candidate prior by combining the closed-form design term with a
//! marginal-likelihood term and a fission/sample-reuse term, minimize the
//! estimate over a prior class, and evaluate everything against quadrature
//! ground truth and the plug-in baselines.

pub mod baselines;
pub mod cases;
pub mod design;
pub mod error;
pub mod estimators;
pub mod fission;
pub mod numeric;
pub mod oracle;
pub mod priors;
pub mod rng;
pub mod select;

pub use error::{CoreError, Result};
