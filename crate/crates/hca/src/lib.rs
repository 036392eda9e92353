//! File formats, run configuration and the command line of the `hca` tool.
//!
//! The numerical work lives in [`hca_core`]; this crate reads and writes
//! tensors, manifests, checkpoints and reports, and drives the pre-training
//! and cross-validation pipeline from a JSON run configuration.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod manifest;
pub mod report;
pub mod tensor_file;

pub use error::{Error, Result};
