//! Exponential factorization machines for positive responses over
//! categorical attributes.
//!
//! The model forecasts `exp(bias + attribute effects + pairwise factorized
//! interactions)` and can be trained under squared error (ES) or squared
//! percentage error (PES). Feature selection is a greedy forward search gated
//! by a paired t-test on cross-validation errors.

pub mod abgd;
pub mod error;
pub mod ingest;
pub mod loss;
pub mod lps;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod schema;
pub mod selection;
pub mod synthetic;

#[cfg(test)]
mod test_support;

pub use error::{EfmError, Result};
