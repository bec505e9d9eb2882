//! Two-scale, two-view windowed-attention transformer pipeline for
//! breast-level mammogram classification.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
