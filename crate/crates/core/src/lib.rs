//! Two-stream ConvGRU visual memory for segmenting moving objects in video.
//!
//! An appearance encoder and a motion encoder feed a convolutional GRU
//! that is run in both temporal directions; a 1x1 head turns the fused
//! memory into per-pixel object probabilities. Everything, including the
//! backward passes used for training through time, is implemented here on
//! a small dense tensor type.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod streams;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
