#![no_std]
extern crate alloc;

pub mod datagen;
pub mod error;
pub mod fingerprint;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod task;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use task::TaskSpec;
