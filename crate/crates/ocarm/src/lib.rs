//! Files, configs and experiment orchestration around `ocarm-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod fsutil;
pub mod generate;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
