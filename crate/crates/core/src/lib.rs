//! Masked convolutional generative flows.

pub mod autodiff;
pub mod cli;
pub mod dequant;
pub mod error;
pub mod io;
pub mod layers;
pub mod linalg;
pub mod mcf;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
