//! File formats, experiment drivers and the command line for `cimnet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod image;
pub mod presets;
pub mod report;

pub use error::{Error, Result};
