//! Confounding-adjustment estimators for pairwise comparisons among
//! multi-level treatments, with a Monte Carlo and plasmode simulation engine.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod glm;
pub mod learners;
pub mod matching;
pub mod outcome_methods;
pub mod reporting;
pub mod rng;
pub mod simengine;
pub mod tabular;
pub mod weighting;

pub use error::{Error, Result};
