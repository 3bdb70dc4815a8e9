//! Sparse graphon estimation.
//!
//! The pipeline samples (or reads) a sparse graph, splits its edges, extracts
//! the informative non-backtracking eigenpairs of the first part, estimates
//! joint eigenfunction moments from weighted star counts on the second part,
//! fits a mollified Legendre density to those moments, and samples feature
//! vectors from it to build a step-function graphon estimate.

pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod graphon;
pub mod linalg;
pub mod moment_poly;
pub mod nonbacktracking;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod stars;

pub use error::{Error, Result};
