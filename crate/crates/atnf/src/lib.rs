//! Datasets, model files, configuration and experiment protocols around
//! [`atnf_core`].

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod modelfile;
pub mod ppm;
pub mod synth;

mod error;
mod fsutil;

pub use error::{Error, Result};
pub use fsutil::write_atomic;

/// Version stamped into manifests, configs and reports.
pub const SCHEMA_VERSION: u32 = 1;
