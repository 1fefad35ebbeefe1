//! Dataset loading, the synthetic scene generator and file exports.

mod error;
pub mod export;
pub mod scene_file;
pub mod synthetic;
pub mod tum;
pub mod volume_file;

pub use error::IoError;
pub use export::{
    export_depth, export_image, export_mesh_ply, export_timings, export_trajectory, read_depth, read_mesh_ply, read_rgb,
    read_trajectory,
};
pub use synthetic::{desk_scene, generate_synthetic, orbit, NoiseModel, Primitive, Shape, SyntheticScene, SyntheticSequence, Texture};
pub use scene_file::{parse_scene, SceneDescription};
pub use tum::{load_tum, write_tum, TumSequence};
pub use volume_file::{load_gaussians, load_volume, save_gaussians, save_volume};
