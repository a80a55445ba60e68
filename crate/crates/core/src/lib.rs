//! Cross-validation hyperparameter optimization with explicit ERM tolerances.

pub mod data;
pub mod error;
pub mod heuristics;
pub mod harness;
pub mod hpo;
pub mod model;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
