//! Files, command line, benchmarks and serving around `msr-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod logging;
pub mod schema;
pub mod serve;

pub use error::{Error, Result};
