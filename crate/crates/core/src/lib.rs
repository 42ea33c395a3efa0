//! Continuous level-of-detail Gaussian head avatars.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod export;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod splat;
pub mod trainer;
pub mod uv_field;

pub use error::{Error, Result};
