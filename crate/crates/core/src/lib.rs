//! Learning stochastic cohort-selection policies for unknown applicant
//! populations.

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod fairness;
pub mod optimizer;
pub mod outcome_model;
pub mod policy;
pub mod population;
pub mod rng;
pub mod sampling;
pub mod types;
pub mod utility;

pub use error::{Error, Result};
