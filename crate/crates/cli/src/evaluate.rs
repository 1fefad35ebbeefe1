use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gps_core::eval::{self, GeometryConfig, MeshDistance, MetricReport};
use gps_core::io::{self, tum::MAX_PAIR_GAP};
use gps_core::{Image, Pose};

use crate::run::read_camera;

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// Output directory of `gps run`.
    #[arg(long)]
    pub recon: PathBuf,
    /// Ground truth: a TUM-layout dataset or another run directory.
    #[arg(long)]
    pub truth: PathBuf,
}

fn truth_trajectory(dir: &Path) -> anyhow::Result<Option<Vec<(f64, Pose<f64>)>>> {
    for name in ["groundtruth.txt", "trajectory.txt"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(Some(io::read_trajectory(&p)?));
        }
    }
    Ok(None)
}

/// Pairs each estimated pose with the truth pose nearest in time.
fn paired(est: &[(f64, Pose<f64>)], truth: &[(f64, Pose<f64>)]) -> (Vec<Pose<f64>>, Vec<Pose<f64>>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (t, p) in est {
        let best = truth.iter().min_by(|x, y| (x.0 - t).abs().total_cmp(&(y.0 - t).abs()));
        if let Some((tt, q)) = best {
            if (tt - t).abs() <= MAX_PAIR_GAP {
                a.push(*p);
                b.push(*q);
            }
        }
    }
    (a, b)
}

fn truth_image(truth: &Path, name: &str) -> Option<PathBuf> {
    ["views", "rgb"].iter().map(|d| truth.join(d).join(name)).find(|p| p.exists())
}

/// Mean PSNR and SSIM of the run's view renders against the matching truth
/// images. Pixels the stored volume covers are scored when it is available.
fn image_scores(a: &EvalArgs, trajectory: &[(f64, Pose<f64>)]) -> anyhow::Result<(Option<f64>, Option<f64>)> {
    let dir = a.recon.join("views");
    if !dir.is_dir() {
        return Ok((None, None));
    }
    let mut names: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let volume_path = a.recon.join("volume.gpsv");
    let camera_path = a.recon.join("camera.txt");
    let model = if volume_path.exists() && camera_path.exists() {
        Some((io::load_volume(&volume_path)?, read_camera(&camera_path)?))
    } else {
        None
    };
    let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
    for name in names {
        let Some(tp) = truth_image(&a.truth, &name) else {
            continue;
        };
        let rendered = io::read_rgb(&dir.join(&name))?;
        let reference = io::read_rgb(&tp)?;
        let ts: Option<f64> = name.trim_end_matches(".png").parse().ok();
        let pose = ts.and_then(|t| trajectory.iter().find(|(s, _)| (s - t).abs() < 1e-6).map(|(_, p)| *p));
        let mask = match (&model, pose) {
            (Some((vol, k)), Some(pose)) => vol.raycast(&pose, k).hit,
            _ => Image::filled(rendered.width(), rendered.height(), true),
        };
        let Ok(p) = eval::psnr(&rendered, &reference, &mask) else {
            continue;
        };
        psnr.push(p);
        if let Ok(s) = eval::ssim(&rendered, &reference, &mask) {
            ssim.push(s);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok((mean(&psnr), mean(&ssim)))
}

pub fn execute(a: &EvalArgs) -> anyhow::Result<MetricReport> {
    for d in [&a.recon, &a.truth] {
        if !d.is_dir() {
            bail!("{} is not a directory", d.display());
        }
    }
    let est = io::read_trajectory(&a.recon.join("trajectory.txt"))?;
    let ate_rmse = match truth_trajectory(&a.truth)? {
        Some(t) => {
            let (e, g) = paired(&est, &t);
            Some(eval::ate_rmse(&e, &g)?)
        }
        None => None,
    };
    let (psnr, ssim) = image_scores(a, &est)?;
    let (mesh_path, truth_mesh_path) = (a.recon.join("mesh.ply"), a.truth.join("mesh.ply"));
    let geometry = if mesh_path.exists() && truth_mesh_path.exists() {
        let mesh = io::read_mesh_ply(&mesh_path)?;
        let truth_mesh = io::read_mesh_ply(&truth_mesh_path)?;
        let cfg = GeometryConfig::default();
        let reference = eval::sample_mesh(&truth_mesh, cfg.samples, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 1));
        let index = MeshDistance::new(&truth_mesh, 0.05);
        let dist = |p: &nalgebra::Vector3<f64>| index.distance(p);
        Some(eval::geometry_ratios(&mesh, &reference, &dist, &[], &cfg)?)
    } else {
        None
    };
    Ok(MetricReport {
        psnr,
        ssim,
        ate_rmse,
        geometry,
    })
}
