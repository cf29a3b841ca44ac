//! Automatic locally robust GMM with generated regressors.

pub mod config;
pub mod crossfit;
pub mod data;
pub mod dgmm;
pub mod dictionary;
pub mod error;
pub mod functionals;
pub mod learners;
pub mod riesz;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
