//! One-bit federated aggregation laboratory.
//!
//! Clients compress their model differences to one stochastic bit per
//! coordinate; the server recovers a maximum-likelihood estimate of the mean
//! update from the bit tally. Around that core the crate provides range
//! calibration for local differential privacy, Byzantine client models,
//! full-precision and sign-based baseline aggregators, small learners with
//! label-skewed synthetic data, a round-based training engine and a suite of
//! Monte Carlo oracles for the estimator's statistical guarantees.

pub mod aggregator;
pub mod byzantine;
pub mod config;
pub mod engine;
pub mod error;
pub mod learners;
pub mod privacy;
pub mod quantizer;
pub mod rng;
pub mod verify;
pub mod vector;

pub use error::{ProbitError, Result};
pub use rng::RngStream;
pub use vector::ModelVector;
