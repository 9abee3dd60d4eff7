//! Conformity assessment as a probabilistic filter on construction parameters.
//!
//! The crate follows one pipeline: normal-gamma priors on the log-space
//! parameters of lognormal properties ([`priors`]), acceptance sampling
//! plans and their OC curves ([`plans`]), Bayesian updating of the
//! parameters through the acceptance filter by Metropolis-Hastings
//! ([`bayes`]), and the conversion of reduced variability into improvement
//! factors and partial safety factors ([`calib`]). [`wall`] provides the
//! masonry wall resistance model whose homogeneity degrees weight the
//! inputs, and [`pipeline`] ties everything to scenario files and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod calib;
pub mod error;
pub mod pipeline;
pub mod plans;
pub mod priors;
pub mod seed;
pub mod stats;
pub mod wall;

pub use error::{Error, Result};
