//! Spatial prediction with linear models, kriging and random forests.

pub mod covariance;
pub mod data;
pub mod design;
pub mod error;
pub mod eval;
pub mod forest;
pub mod kriging;
pub mod linalg;
pub mod lm;
pub mod model_io;
pub mod optim;
pub mod pipeline;
pub mod rfrk;
pub mod selection;
pub mod sim;
pub mod slm;
pub mod transform;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
