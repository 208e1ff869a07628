//! Privacy-preserving transformations for wearable sensor data.
//!
//! Two learned transformations sit at the core of the crate:
//!
//! - [`replacement`]: an autoencoder that rewrites windows of sensitive
//!   activities into neutral-looking data and passes everything else through.
//! - [`anonymization`]: an encoder/decoder trained against identity
//!   recognizers so that released windows keep activity information but lose
//!   user-identifying patterns.
//!
//! [`baselines`] holds the comparison transforms (FFT resampling, singular
//! spectrum analysis) and the DTW nearest-neighbour re-identification rank;
//! [`evaluation`] trains probe classifiers and produces F1/confusion reports.

pub mod anonymization;
pub mod baselines;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod neuralcore;
pub mod replacement;

pub use error::{Error, Result};
