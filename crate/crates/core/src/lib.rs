pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod sampling;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageGrid;
