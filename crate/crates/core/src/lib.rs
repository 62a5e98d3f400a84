//! Panorama inpainting with windowed Fourier token mixers.

pub mod adversarial;
pub mod checkpoint;
pub mod core_ops;
pub mod data;
pub mod error;
pub mod fourier;
pub mod generator;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod masks;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
