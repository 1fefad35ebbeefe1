use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gps_core::eval::{self, GeometryConfig, MetricReport, Viewpoint};
use gps_core::io::{self, SceneDescription, SyntheticScene, TumSequence};
use gps_core::pipeline::{self, PipelineConfig, ReconResult};
use gps_core::splat::{self, GaussianSet, RenderConfig};
use gps_core::tsdf::{SdfRender, TsdfVolume};
use gps_core::{ColorImage, DepthImage, Frame, Intrinsics, Pose};

/// Number of evenly spaced input frames scored in `metrics.txt`.
pub const DEFAULT_EVAL_VIEWS: usize = 10;

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// TUM-layout directory or synthetic scene description file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pipeline configuration (key = value lines); defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run Gaussian rounds concurrently with tracking and fusion.
    #[arg(long)]
    pub parallel: bool,
    /// Configuration override, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Process at most this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EVAL_VIEWS)]
    pub eval_views: usize,
}

impl RunArgs {
    pub fn new(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            config: None,
            out: out.into(),
            seed: None,
            parallel: false,
            overrides: Vec::new(),
            frames: None,
            eval_views: DEFAULT_EVAL_VIEWS,
        }
    }

    pub fn pipeline_config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{o}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.parallel {
            cfg.parallel = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Input frames and whatever ground truth comes with them.
pub enum Dataset {
    Tum { seq: TumSequence, limit: usize },
    Scene { scene: SyntheticScene, seed: u64 },
}

impl Dataset {
    /// A directory is read as TUM layout, a file as a scene description.
    pub fn open(path: &Path, frames: Option<usize>, seed: u64) -> anyhow::Result<Self> {
        if path.is_dir() {
            let seq = TumSequence::open(path)?;
            let limit = frames.unwrap_or(usize::MAX).min(seq.len());
            Ok(Self::Tum { seq, limit })
        } else {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let desc = io::parse_scene(&text).with_context(|| format!("in {}", path.display()))?;
            Ok(Self::Scene {
                scene: desc.build(frames),
                seed,
            })
        }
    }

    pub fn from_scene(desc: &SceneDescription, frames: Option<usize>, seed: u64) -> Self {
        Self::Scene {
            scene: desc.build(frames),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Tum { limit, .. } => *limit,
            Self::Scene { scene, .. } => scene.trajectory.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ground_truth(&self) -> Option<Vec<Pose<f64>>> {
        match self {
            Self::Tum { seq, limit } => seq.ground_truth_for_frames().map(|mut g| {
                g.truncate(*limit);
                g
            }),
            Self::Scene { scene, .. } => Some(scene.trajectory.clone()),
        }
    }

    pub fn frames(&self) -> Box<dyn Iterator<Item = Result<Frame, String>> + '_> {
        match self {
            Self::Tum { seq, limit } => Box::new(seq.frames().take(*limit).map(|r| r.map_err(|e| e.to_string()))),
            Self::Scene { scene, seed } => Box::new(scene.frames(*seed).map(|r| r.map_err(|e| e.to_string()))),
        }
    }

    /// Reference color at `index` and, for synthetic scenes, exact depth.
    fn truth(&self, index: usize) -> anyhow::Result<(ColorImage<f32>, Option<DepthImage>)> {
        match self {
            Self::Tum { seq, .. } => Ok((seq.load_frame(index)?.rgb, None)),
            Self::Scene { scene, .. } => {
                let v = scene.render(&scene.trajectory[index]);
                Ok((v.rgb, Some(v.depth)))
            }
        }
    }
}

/// Scores of one evaluation view, over the pixels the SDF covers.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    pub frame: usize,
    pub timestamp: f64,
    pub hit_pixels: usize,
    /// Composite (SDF plus Gaussians) PSNR.
    pub psnr: f64,
    /// PSNR of the SDF colors alone.
    pub sdf_psnr: f64,
    pub ssim: f64,
}

pub struct RunOutput {
    pub result: ReconResult,
    pub report: MetricReport,
    pub views: Vec<ViewScore>,
    pub elapsed_s: f64,
}

impl RunOutput {
    pub fn fps(&self) -> f64 {
        self.result.poses.len() as f64 / self.elapsed_s.max(1e-9)
    }

    pub fn summary(&self) -> String {
        format!(
            "{} frames in {:.1} s ({:.2} fps), {} keyframes, {} Gaussians, {} lost",
            self.result.poses.len(),
            self.elapsed_s,
            self.fps(),
            self.result.keyframes.len(),
            self.result.gaussians.len(),
            self.result.lost_frames.len()
        )
    }
}

/// SDF raycast at `pose` and its composite with the Gaussians.
pub fn render_view(
    volume: &TsdfVolume,
    set: &GaussianSet<f32>,
    pose: &Pose<f64>,
    intr: &Intrinsics<f64>,
    cfg: &RenderConfig,
) -> (SdfRender, ColorImage<f32>) {
    let sdf = volume.raycast(pose, intr);
    let g = splat::forward(set, &pose.cast(), &intr.cast(), &sdf.depth, cfg);
    let comp = splat::compose(&sdf.color, &g);
    (sdf, comp)
}

/// `k` frame indices spread evenly over `0..n`, first and last included.
pub fn eval_indices(n: usize, k: usize) -> Vec<usize> {
    match (n, k) {
        (0, _) | (_, 0) => Vec::new(),
        _ if k >= n => (0..n).collect(),
        (_, 1) => vec![0],
        _ => (0..k).map(|i| i * (n - 1) / (k - 1)).collect(),
    }
}

pub fn image_name(timestamp: f64) -> String {
    format!("{timestamp:.6}.png")
}

/// Writes the camera as `fx fy cx cy width height`.
pub fn write_camera(intr: &Intrinsics<f64>, path: &Path) -> anyhow::Result<()> {
    let text = format!("{} {} {} {} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height);
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_camera(path: &Path) -> anyhow::Result<Intrinsics<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("{}: expected `fx fy cx cy width height`", path.display()))?;
    let [fx, fy, cx, cy, w, h] = v[..] else {
        bail!("{}: expected `fx fy cx cy width height`", path.display());
    };
    Ok(Intrinsics::new(fx, fy, cx, cy, w as usize, h as usize, 1.0)?)
}

fn score_views(
    data: &Dataset,
    result: &ReconResult,
    indices: &[usize],
    cfg: &PipelineConfig,
    out: &Path,
) -> anyhow::Result<(Vec<ViewScore>, Vec<(Pose<f64>, DepthImage)>)> {
    let dir = out.join("views");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut scores = Vec::new();
    let mut depths = Vec::new();
    for &i in indices {
        let pose = result.poses[i];
        let (truth, depth) = data.truth(i)?;
        let (sdf, comp) = render_view(&result.volume, &result.gaussians, &pose, &result.intrinsics, &cfg.render);
        io::export_image(&comp, &dir.join(image_name(result.timestamps[i])))?;
        if let Some(d) = depth {
            if let Some(gt) = data.ground_truth() {
                depths.push((gt[i], d));
            }
        }
        let (Ok(psnr), Ok(sdf_psnr)) = (eval::psnr(&comp, &truth, &sdf.hit), eval::psnr(&sdf.color, &truth, &sdf.hit)) else {
            continue;
        };
        let ssim = eval::ssim(&comp, &truth, &sdf.hit).unwrap_or(f64::NAN);
        scores.push(ViewScore {
            frame: i,
            timestamp: result.timestamps[i],
            hit_pixels: sdf.hit.count(),
            psnr,
            sdf_psnr,
            ssim,
        });
    }
    Ok((scores, depths))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn write_outputs(result: &ReconResult, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    io::export_trajectory(&result.poses, &result.timestamps, &out.join("trajectory.txt"))?;
    io::export_mesh_ply(&result.volume.extract_mesh(), &out.join("mesh.ply"))?;
    io::save_gaussians(&result.gaussians, &out.join("gaussians.gpsf"))?;
    io::save_volume(&result.volume, &out.join("volume.gpsv"))?;
    io::export_timings(&result.timings, &out.join("timings.csv"))?;
    write_camera(&result.intrinsics, &out.join("camera.txt"))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).with_context(|| format!("writing {}", cfg_path.display()))?;
    let dir = out.join("keyframes");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for kf in &result.keyframes {
        let (_, comp) = render_view(&result.volume, &result.gaussians, &kf.pose, &result.intrinsics, &cfg.render);
        io::export_image(&comp, &dir.join(image_name(result.timestamps[kf.index])))?;
    }
    Ok(())
}

/// Runs the pipeline, writes every output into `args.out` and scores the
/// evaluation views.
pub fn execute(args: &RunArgs) -> anyhow::Result<RunOutput> {
    let cfg = args.pipeline_config()?;
    let data = Dataset::open(&args.dataset, args.frames, cfg.seed)?;
    execute_on(&data, &cfg, &args.out, args.eval_views)
}

pub fn execute_on(data: &Dataset, cfg: &PipelineConfig, out: &Path, eval_views: usize) -> anyhow::Result<RunOutput> {
    if data.is_empty() {
        bail!("dataset has no frames");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let truth = data.ground_truth();
    let initial = truth.as_ref().map_or_else(Pose::identity, |t| t[0]);
    let start = Instant::now();
    let result = pipeline::run(data.frames(), cfg, initial)?;
    let elapsed_s = start.elapsed().as_secs_f64();
    write_outputs(&result, cfg, out)?;

    let indices = eval_indices(result.poses.len(), eval_views);
    let (views, depths) = score_views(data, &result, &indices, cfg, out)?;
    let ate_rmse = truth.as_ref().and_then(|t| eval::ate_rmse(&result.poses, &t[..result.poses.len()]).ok());
    let geometry = match data {
        Dataset::Scene { scene, .. } if !depths.is_empty() => {
            let viewpoints: Vec<Viewpoint> = depths
                .iter()
                .map(|(pose, d)| Viewpoint {
                    pose: *pose,
                    intrinsics: scene.intrinsics,
                    depth: Some(d),
                })
                .collect();
            let gcfg = GeometryConfig {
                seed: cfg.seed,
                ..GeometryConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let reference = eval::sample_depth_views(&viewpoints, gcfg.samples, &mut rng);
            let dist = |p: &nalgebra::Vector3<f64>| scene.sdf(p).abs();
            eval::geometry_ratios(&result.volume.extract_mesh(), &reference, &dist, &viewpoints, &gcfg).ok()
        }
        _ => None,
    };
    let report = MetricReport {
        psnr: mean(views.iter().map(|v| v.psnr)),
        ssim: mean(views.iter().map(|v| v.ssim)),
        ate_rmse,
        geometry,
    };
    let mut csv = String::from("frame,timestamp,hit_pixels,psnr_db,sdf_psnr_db,ssim\n");
    for v in &views {
        csv.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6},{:.6}\n",
            v.frame, v.timestamp, v.hit_pixels, v.psnr, v.sdf_psnr, v.ssim
        ));
    }
    let vpath = out.join("views.csv");
    fs::write(&vpath, csv).with_context(|| format!("writing {}", vpath.display()))?;
    let mpath = out.join("metrics.txt");
    fs::write(&mpath, report.to_text()).with_context(|| format!("writing {}", mpath.display()))?;
    Ok(RunOutput {
        result,
        report,
        views,
        elapsed_s,
    })
}
