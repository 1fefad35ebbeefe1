//! Online RGB-D reconstruction with a hybrid Gaussian-plus-SDF scene model.
//!
//! A voxel-hashed TSDF carries geometry and base color; a sparse set of 3D
//! Gaussians, rendered sort-free and depth-culled against the TSDF surface,
//! corrects what the voxel colors miss.

pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod lifecycle;
pub mod pipeline;
pub mod scalar;
pub mod splat;
pub mod tracking;
pub mod tsdf;

pub use geometry::{Frame, FramePyramid, GeometryError, GeometryMaps, Intrinsics, Pose, Twist};
pub use image::{ColorImage, DepthImage, Image, Mask};
pub use scalar::Real;

pub type Pose32 = Pose<f32>;
pub type Pose64 = Pose<f64>;
pub type Twist64 = Twist<f64>;
pub type Intrinsics32 = Intrinsics<f32>;
pub type Intrinsics64 = Intrinsics<f64>;
