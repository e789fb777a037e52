//! Composition-incremental learning toolkit.

pub mod builder;
pub mod cli;
pub mod domain;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod semantics;
pub mod synthesizer;
pub mod trainer;

pub use error::{Error, Result};
