//! Regroup median loss (RML) laboratory for learning with noisy labels.
//!
//! The crate covers the full pipeline at desk scale: synthetic and IDX
//! datasets, label-noise injection, small classifiers with analytic
//! gradients, the RML loss-estimation engine, CE / RML / semi-supervised
//! training loops and a statistical verification suite.

pub mod cli;
pub mod error;
pub mod data;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod rml;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
