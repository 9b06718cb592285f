//! Toy-scale laboratory for personalized diffusion editing.

pub mod bench;
pub mod classifier;
pub mod concept;
pub mod denoiser;
pub mod editing;
pub mod error;
pub mod guidance;
pub mod image_io;
pub mod lab;
pub mod mask;
pub mod metrics;
pub mod ops;
pub mod prompt;
pub mod rng;
pub mod schedule;
pub mod steer;
pub mod train;

pub use error::{LabError, Result};
