//! Datasets, checkpoints, images and synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod image;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use dataset::Dataset;
pub use image::write_image_grid;
