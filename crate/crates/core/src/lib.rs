//! Pose-token transformer for part-aware person re-identification.

pub mod error;
pub mod heatmap;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
