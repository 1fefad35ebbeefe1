use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use gps_core::io;
use gps_core::pipeline::PipelineConfig;
use gps_core::Pose;

use crate::run::{read_camera, render_view};

#[derive(Args, Clone, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub gaussians: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// Camera-to-world pose "tx ty tz qx qy qz qw".
    #[arg(long, allow_hyphen_values = true)]
    pub pose: String,
    /// Camera file; defaults to camera.txt next to the volume.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Configuration of the run; defaults to config.txt next to the volume.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_pose(s: &str) -> anyhow::Result<Pose<f64>> {
    let v: Vec<f64> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("malformed pose `{s}`"))?;
    let [tx, ty, tz, qx, qy, qz, qw] = v[..] else {
        bail!("pose needs 7 numbers \"tx ty tz qx qy qz qw\", got {}", v.len());
    };
    let q = Quaternion::new(qw, qx, qy, qz);
    if !v.iter().all(|x| x.is_finite()) || q.norm() < 1e-9 {
        bail!("malformed pose `{s}`");
    }
    Ok(Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(tx, ty, tz)))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn execute(a: &RenderArgs) -> anyhow::Result<()> {
    let pose = parse_pose(&a.pose)?;
    let camera = a.camera.clone().unwrap_or_else(|| sibling(&a.volume, "camera.txt"));
    let intr = read_camera(&camera)?;
    let mut cfg = PipelineConfig::default();
    let cfg_path = a.config.clone().unwrap_or_else(|| sibling(&a.volume, "config.txt"));
    if a.config.is_some() || cfg_path.exists() {
        let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", cfg_path.display()))?;
    }
    let volume = io::load_volume(&a.volume)?;
    let set = io::load_gaussians(&a.gaussians, cfg.render.sh_degree)?;
    cfg.render.sh_degree = set.sh_degree();
    let (_, comp) = render_view(&volume, &set, &pose, &intr, &cfg.render);
    io::export_image(&comp, &a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_strings() {
        let p = parse_pose("1 2 3 0 0 0 1").unwrap();
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
        assert!(p.rotation_angle() < 1e-12);
        let q = parse_pose("0 0 0 0 0 0.7071068 0.7071068").unwrap();
        assert!((q.rotation_angle() - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        assert!(parse_pose("1 2 3").is_err());
        assert!(parse_pose("a b c d e f g").is_err());
        assert!(parse_pose("0 0 0 0 0 0 0").is_err());
    }
}
