//! Explicit 4D Gaussian fields: differentiable rasterization, fitting
//! losses, a flow-matching prior, a toy large reconstruction model and
//! synthetic scene generation.

pub mod camera;
pub mod datagen;
pub mod error;
pub mod fitter;
pub mod flowmatch;
pub mod formats;
pub mod raster;
pub mod gaussian;
pub mod ldrm;
pub mod losses;
pub mod nn;
pub mod tensor;

pub use camera::{Camera, Pose, Trajectory, TrajectoryKind};
pub use error::{Error, Result};
pub use gaussian::{DeformationDelta, GaussianField, GaussianPrimitive, Quat};
pub use tensor::Image;
