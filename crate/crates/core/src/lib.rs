//! Iterative mutual refinement of 2D semantic segmentation and 3D semantic
//! scene completion on synthetic RGB-D rooms.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod dcp;
pub mod dda;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scene;
pub mod tensor;
pub mod trainer;

mod container;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
