//! 3D-aware image editing through depth lifting, activation warping and
//! energy-guided diffusion sampling.

pub mod depth_edit;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod poisson;
pub mod raster;
pub mod scenes;

pub use error::{Error, Result};
pub use raster::{FeatureMap, Mask, ScalarField};
