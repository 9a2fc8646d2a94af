//! S-learner rule ensembles for heterogeneous treatment effects in two-arm trials.
//!
//! The pipeline is:
//!
//! 1. [`boosting`] fits a gradient-boosted ensemble of size-randomized regression
//!    trees on the covariates with the treatment indicator appended as one more
//!    split candidate.
//! 2. [`rules`] turns every non-root tree node into a rule, then sorts the rules
//!    into main-effect rules (no treatment condition) and treatment rules (a
//!    treatment condition, stripped to a shared covariate-only basis).
//! 3. [`solver`] fits intercept, main-effect rules, winsorized linear terms and
//!    paired arm coefficients per treatment rule by group lasso, with the
//!    regularization strength picked by cross-validation.
//! 4. [`hte`] turns the fitted coefficients into arm-wise predictions, the
//!    treatment effect estimate, and rule-level reports.
//!
//! [`simharness`] reproduces the simulation protocol used to evaluate the
//! estimator.

pub mod boosting;
pub mod dataset;
pub mod error;
pub mod hte;
pub mod rules;
pub mod simharness;
pub mod solver;

pub use error::{Error, Result};
