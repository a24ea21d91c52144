//! Bayesian multiple imputation for sparsely observed functional data.
//!
//! Curves (or multiway arrays of curves) measured at scattered time
//! points are completed by a low-rank penalized-spline factor model fit
//! with a Gibbs sampler. The sampler retains a set of completed datasets
//! rather than a single fill-in, so downstream analyses can propagate
//! imputation uncertainty — per-entry credible intervals come from the
//! draws directly, and regression results pool across the completed
//! datasets by Rubin's rules.

pub mod error;
pub mod harness;
pub mod inference;
pub mod io;
pub mod multilinear;
pub mod multiway_gibbs;
pub mod selection;
pub mod single_gibbs;

mod draws;

pub use error::{Error, Result};
