//! Pose-free progressive Gaussian splatting reconstruction.

pub mod error;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod providers;
pub mod raster;
pub mod scene;
pub mod synthetic;

pub use error::{Error, Result};
pub use nalgebra;
