//! Inverse-probability-weighted and doubly robust estimators of a population
//! mean under nonresponse, with logistic, robit(1) and boosted propensity
//! scores, and a Monte Carlo harness comparing them.

pub mod cli;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linear_models;
pub mod propensity;
pub mod weighting;

pub use error::{Error, Result};
