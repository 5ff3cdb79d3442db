//! Learning latent dynamics from a noisy scalar time series: a tape-based
//! autodiff engine with a forward tangent channel, residual MLPs, delay
//! embedding with a false-nearest-neighbor mask, a state-dependent linear
//! latent field, the joint training schedule, and evaluation utilities.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
