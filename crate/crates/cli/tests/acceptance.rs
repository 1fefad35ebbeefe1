//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any required criterion fails.

#[path = "../../core/tests/support/gradient_oracle.rs"]
mod gradient_oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gps_cli::run::{execute_on, Dataset, RunOutput};
use gps_core::eval::{self, GeometryConfig, Viewpoint};
use gps_core::io::synthetic::{Primitive, Shape, SyntheticScene, Texture};
use gps_core::io::{self, SceneDescription};
use gps_core::pipeline::{self, PipelineConfig};
use gps_core::splat::{backward, compose, forward, Gaussian, GaussianSet, RenderConfig};
use gps_core::tsdf::{TsdfConfig, TsdfVolume};
use gps_core::{ColorImage, Image, Intrinsics, Pose, Real};

// Tolerances and budgets.
const ORDER_TOL_F32: f64 = 1e-5;
const ORDER_TOL_F64: f64 = 1e-10;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-6;
const TSDF_DEPTH_RMSE: f64 = 0.005;
const TSDF_VERTEX_TOL: f64 = 0.005;
const TSDF_VERTEX_FRACTION: f64 = 0.99;
const TSDF_RATIO: f64 = 0.99;
const ATE_MAX: f64 = 0.005;
const MAX_STEP_DEG: f64 = 1.0;
const MAX_STEP_M: f64 = 0.01;
const HYBRID_GAIN_DB: f64 = 2.0;
const GAUSSIAN_PIXEL_RATIO: f64 = 0.25;
const SHAPE_TOL: f32 = 1e-5;
const MIN_FPS: f64 = 10.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    failed: Vec<usize>,
}

impl Suite {
    fn report(&mut self, id: usize, name: &str, budget_s: Option<f64>, secs: f64, o: Outcome, required: bool) {
        let in_budget = budget_s.is_none_or(|b| secs < b);
        let pass = o.pass && in_budget;
        let tag = match (pass, required) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (informational)",
        };
        let budget = budget_s.map_or(String::new(), |b| format!(" / budget {b:.0} s"));
        println!("criterion {id:>2} {name}: {tag} -- {} [{secs:.1} s{budget}]", o.detail);
        if !pass && required {
            self.failed.push(id);
        }
    }
}

fn scenes_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes")
}

fn load_scene(name: &str) -> SceneDescription {
    let path = scenes_dir().join(name);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    io::parse_scene(&text).expect("valid scene file")
}

fn random_colors(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage<f32> {
    Image::from_fn(w, h, |_, _| Vector3::new(rng.random(), rng.random(), rng.random()))
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Pose::from_quaternion(&nalgebra::UnitQuaternion::from_scaled_axis(axis * 0.8), t)
}

/// Random Gaussians in the view frustum of `pose`.
fn frustum_gaussians<T: Real>(rng: &mut ChaCha8Rng, n: usize, pose: &Pose<f64>, k: &Intrinsics<f64>) -> GaussianSet<T> {
    let mut set = GaussianSet::new(1);
    for _ in 0..n {
        let z = rng.random_range(0.5..3.0);
        let c = k.unproject(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64), z);
        let mut r = || rng.random_range(-1.0..1.0);
        let g = Gaussian {
            position: pose.transform_point(&c),
            log_scale: Vector3::new(r() * 0.5 - 3.5, r() * 0.5 - 3.5, r() * 0.5 - 4.5),
            rotation: Quaternion::new(r(), r(), r(), r() + 1.5),
            raw_opacity: r() * 3.0,
            sh: (0..4).map(|_| Vector3::new(r(), r(), r())).collect(),
        };
        set.push(&Gaussian {
            position: g.position.map(T::lit),
            log_scale: g.log_scale.map(T::lit),
            rotation: Quaternion::new(T::lit(g.rotation.w), T::lit(g.rotation.i), T::lit(g.rotation.j), T::lit(g.rotation.k)),
            raw_opacity: T::lit(g.raw_opacity),
            sh: g.sh.iter().map(|c| c.map(T::lit)).collect(),
        });
    }
    set
}

fn permute<T: Real>(set: &GaussianSet<T>, rng: &mut ChaCha8Rng) -> GaussianSet<T> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(rng);
    let mut out = GaussianSet::new(set.sh_degree());
    for i in idx {
        out.push(&set.get(i));
    }
    out
}

fn compose_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = Intrinsics::new(200.0, 200.0, 79.5, 59.5, 160, 120, 1.0).unwrap();
    let mut bad = 0usize;
    for _ in 0..5 {
        let ct = random_colors(&mut rng, 160, 120);
        let depth = Image::from_fn(160, 120, |_, _| rng.random_range(0.0f32..3.0));
        let pose = random_pose(&mut rng);
        let empty32 = GaussianSet::<f32>::new(1);
        let c32 = compose(&ct, &forward(&empty32, &pose.cast(), &k.cast(), &depth, &RenderConfig::default()));
        let empty64 = GaussianSet::<f64>::new(1);
        let c64 = compose(&ct, &forward(&empty64, &pose, &k, &depth, &RenderConfig::default()));
        for i in 0..ct.len() {
            let t = ct.as_slice()[i];
            let same32 = (0..3).all(|c| c32.as_slice()[i][c].to_bits() == t[c].to_bits());
            let same64 = (0..3).all(|c| (c64.as_slice()[i][c] as f32).to_bits() == t[c].to_bits() && c64.as_slice()[i][c] == t[c] as f64);
            bad += (!same32 || !same64) as usize;
        }
    }
    outcome(bad == 0, format!("{bad} pixels differ from C_t over 5 random images (f32 and f64)"))
}

fn order_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = Intrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240, 1.0).unwrap();
    let pose = random_pose(&mut rng);
    let ct = random_colors(&mut rng, 320, 240);
    let depth = Image::from_fn(320, 240, |_, _| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.5f32..3.5) });
    let cfg = RenderConfig::default();
    fn max_diff<T: Real>(a: &ColorImage<T>, b: &ColorImage<T>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (0..3).map(|c| (x[c].as_f64() - y[c].as_f64()).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }
    let set32: GaussianSet<f32> = frustum_gaussians(&mut rng.clone(), 1000, &pose, &k);
    let set64: GaussianSet<f64> = frustum_gaussians(&mut rng, 1000, &pose, &k);
    let base32 = compose(&ct, &forward(&set32, &pose.cast(), &k.cast(), &depth, &cfg));
    let base64 = compose(&ct, &forward(&set64, &pose, &k, &depth, &cfg));
    let covered = base64.as_slice().iter().zip(ct.as_slice()).filter(|(a, b)| (*a - b.cast::<f64>()).norm() > 1e-3).count();
    let (mut d32, mut d64) = (0.0f64, 0.0f64);
    for p in 0..10u64 {
        let mut prng = ChaCha8Rng::seed_from_u64(100 + p);
        let c32 = compose(&ct, &forward(&permute(&set32, &mut prng.clone()), &pose.cast(), &k.cast(), &depth, &cfg));
        let c64 = compose(&ct, &forward(&permute(&set64, &mut prng), &pose, &k, &depth, &cfg));
        d32 = d32.max(max_diff(&base32, &c32));
        d64 = d64.max(max_diff(&base64, &c64));
    }
    outcome(
        d32 <= ORDER_TOL_F32 && d64 <= ORDER_TOL_F64 && covered > 1000,
        format!("max |dC*| f32 {d32:.2e} (<= {ORDER_TOL_F32:.0e}), f64 {d64:.2e} (<= {ORDER_TOL_F64:.0e}); {covered} pixels covered"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = 1 + case % 8;
        let (set, scene) = gradient_oracle::random_case(&mut rng, n);
        worst = worst.max(gradient_oracle::check(&set, &scene, GRAD_FLOOR));
    }
    outcome(worst < GRAD_REL_TOL, format!("worst relative error {worst:.2e} over 100 scenes of 1-8 Gaussians (< {GRAD_REL_TOL:.0e})"))
}

fn wall_scene(k: Intrinsics<f64>) -> SyntheticScene {
    SyntheticScene {
        primitives: vec![Primitive {
            shape: Shape::Plane { normal: -Vector3::z(), offset: -1.0 },
            texture: Texture::Checker { a: Vector3::new(0.8, 0.3, 0.2), b: Vector3::new(0.2, 0.4, 0.8), size: 0.07 },
        }],
        trajectory: vec![Pose::identity(); 3],
        intrinsics: k,
        noise: Default::default(),
        light_dir: Vector3::new(0.0, 0.0, 1.0),
        ambient: 0.5,
    }
}

fn depth_culling() -> Outcome {
    let k = Intrinsics::new(100.0, 100.0, 39.5, 29.5, 80, 60, 1.0).unwrap();
    let scene = wall_scene(k);
    let mut vol = TsdfVolume::new(TsdfConfig::default()).unwrap();
    for f in scene.frames(0) {
        let f = f.unwrap();
        vol.allocate(&f, &Pose::identity()).unwrap();
        vol.integrate(&f, &Pose::identity());
    }
    let r = vol.raycast(&Pose::identity(), &k);
    let cfg = RenderConfig::default();
    let disc = |z: f64| {
        let mut set = GaussianSet::<f64>::new(1);
        set.push(&Gaussian {
            position: Vector3::new(0.0, 0.0, z),
            log_scale: Vector3::new(0.05f64.ln(), 0.05f64.ln(), 0.005f64.ln()),
            rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            raw_opacity: 2.0,
            sh: vec![Vector3::new(1.0, -0.5, 0.3), Vector3::zeros(), Vector3::zeros(), Vector3::zeros()],
        });
        set
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let upstream: ColorImage<f64> = Image::from_fn(80, 60, |_, _| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let probe = |set: &GaussianSet<f64>| {
        let g = forward(set, &Pose::identity(), &k, &r.depth, &cfg);
        let grad = backward(set, &Pose::identity(), &k, &r.depth, &r.color, &g, &upstream, &cfg);
        let contribution = g.weight.as_slice().iter().filter(|w| **w != 0.0).count()
            + g.color.as_slice().iter().filter(|c| c.iter().any(|v| *v != 0.0)).count();
        (contribution, grad.data.iter().filter(|v| **v != 0.0).count(), g.weight)
    };
    let (behind_px, behind_grad, _) = probe(&disc(1.1));
    let (front_px, front_grad, footprint) = probe(&disc(0.99));
    // The wall must be hit wherever the disc lands; the outermost row and
    // column of the frustum lack interpolation support and may miss.
    let covered = footprint.as_slice().iter().filter(|w| **w != 0.0).count();
    let covered_hits = footprint.as_slice().iter().zip(r.hit.as_slice()).filter(|(w, h)| **w != 0.0 && **h).count();
    outcome(
        covered > 0 && covered_hits == covered && behind_px == 0 && behind_grad == 0 && front_px > 0 && front_grad > 0,
        format!(
            "10 cm behind wall: {behind_px} nonzero outputs, {behind_grad} nonzero gradients (control 1 cm in front: {front_px}, {front_grad}); wall hit under {covered_hits}/{covered} footprint pixels, {}/{} overall",
            r.hit.count(),
            80 * 60
        ),
    )
}

fn tsdf_oracle() -> Outcome {
    let desc = load_scene("sphere.scene");
    let scene = desc.build(Some(50));
    let sphere = match desc.primitives.as_slice() {
        [Primitive { shape: Shape::Sphere { center, radius }, .. }] => (*center, *radius),
        _ => return outcome(false, "sphere.scene must hold exactly one sphere".into()),
    };
    let cfg = TsdfConfig { voxel_size: 0.005, ..Default::default() };
    let mut vol = TsdfVolume::new(cfg).unwrap();
    let mut depths = Vec::new();
    for (f, pose) in scene.frames(0).zip(&scene.trajectory) {
        let f = f.unwrap();
        vol.allocate(&f, pose).unwrap();
        vol.integrate(&f, pose);
        depths.push(f.depth);
    }
    let k = scene.intrinsics;
    let (mut se, mut n) = (0.0, 0usize);
    for i in (0..scene.trajectory.len()).step_by(7) {
        let pose = &scene.trajectory[i];
        let r = vol.raycast(pose, &k);
        let truth = scene.render(pose).depth;
        for (a, b) in r.depth.as_slice().iter().zip(truth.as_slice()) {
            if *a > 0.0 && *b > 0.0 {
                se += ((a - b) as f64).powi(2);
                n += 1;
            }
        }
    }
    let rmse = (se / n.max(1) as f64).sqrt();
    let mesh = vol.extract_mesh();
    let near = mesh
        .vertices
        .iter()
        .filter(|v| ((v.cast::<f64>() - sphere.0).norm() - sphere.1).abs() < TSDF_VERTEX_TOL)
        .count();
    let frac = near as f64 / mesh.vertices.len().max(1) as f64;
    let views: Vec<Viewpoint> = scene
        .trajectory
        .iter()
        .zip(&depths)
        .map(|(p, d)| Viewpoint { pose: *p, intrinsics: k, depth: Some(d) })
        .collect();
    let gcfg = GeometryConfig::default();
    let reference = eval::sample_depth_views(&views, gcfg.samples, &mut ChaCha8Rng::seed_from_u64(5));
    let dist = |p: &Vector3<f64>| scene.sdf(p).abs();
    let Ok(g) = eval::geometry_ratios(&mesh, &reference, &dist, &views, &gcfg) else {
        return outcome(false, "geometry evaluation saw nothing".into());
    };
    outcome(
        rmse < TSDF_DEPTH_RMSE && frac >= TSDF_VERTEX_FRACTION && g.accuracy_ratio >= TSDF_RATIO && g.completion_ratio >= TSDF_RATIO,
        format!(
            "depth RMSE {:.2} mm over {n} px; {:.2}% of {} vertices within 5 mm; acc/comp ratio {:.4}/{:.4} at 3 cm",
            rmse * 1e3,
            frac * 100.0,
            mesh.vertices.len(),
            g.accuracy_ratio,
            g.completion_ratio
        ),
    )
}

fn tracking_oracle() -> Outcome {
    let desc = load_scene("desk.scene");
    let data = Dataset::from_scene(&desc, None, 0);
    let truth = data.ground_truth().unwrap();
    let (mut max_deg, mut max_m) = (0.0f64, 0.0f64);
    for w in truth.windows(2) {
        let rel = w[0].inverse().compose(&w[1]);
        max_deg = max_deg.max(rel.rotation_angle().to_degrees());
        max_m = max_m.max(rel.translation.norm());
    }
    let cfg = PipelineConfig { gaussians: false, ..Default::default() };
    let result = match pipeline::run(data.frames(), &cfg, truth[0]) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let ate = eval::ate_rmse(&result.poses, &truth).unwrap();
    outcome(
        truth.len() == 200 && desc.noise.depth_sigma == 0.002 && max_deg <= MAX_STEP_DEG && max_m <= MAX_STEP_M && ate < ATE_MAX,
        format!(
            "ATE RMSE {:.3} mm over {} frames (< {:.1} mm); depth sigma {} m; max step {max_deg:.2} deg / {:.1} mm",
            ate * 1e3,
            truth.len(),
            ATE_MAX * 1e3,
            desc.noise.depth_sigma,
            max_m * 1e3
        ),
    )
}

fn desk_run(voxel: f32, out: &Path) -> anyhow::Result<RunOutput> {
    let desc = load_scene("desk.scene");
    let data = Dataset::from_scene(&desc, None, 0);
    let mut cfg = PipelineConfig::default();
    cfg.tsdf.voxel_size = voxel;
    execute_on(&data, &cfg, out, 10)
}

fn hybrid_gain(run: &RunOutput) -> Outcome {
    let n = run.views.len() as f64;
    let comp = run.views.iter().map(|v| v.psnr).sum::<f64>() / n;
    let sdf = run.views.iter().map(|v| v.sdf_psnr).sum::<f64>() / n;
    let min_hit = run.views.iter().map(|v| v.hit_pixels).min().unwrap_or(0);
    let count = run.result.gaussians.len();
    let limit = GAUSSIAN_PIXEL_RATIO * min_hit as f64;
    outcome(
        run.views.len() == 10 && comp - sdf >= HYBRID_GAIN_DB && (count as f64) < limit,
        format!(
            "composite {comp:.2} dB vs SDF-only {sdf:.2} dB over {} views: gain {:.2} dB (>= {HYBRID_GAIN_DB}); {count} Gaussians < {limit:.0}",
            run.views.len(),
            comp - sdf
        ),
    )
}

fn lifecycle_invariants(run: &RunOutput) -> Outcome {
    let rounds = &run.result.rounds;
    let violations: usize = rounds.iter().map(|r| r.violations).sum();
    let mut spawned = 0usize;
    let mut bad_shape = 0usize;
    for s in rounds.iter().flat_map(|r| &r.spawned_scales) {
        spawned += 1;
        let ok = (s.x - s.y).abs() <= SHAPE_TOL * s.x && (s.z - 0.1 * s.x).abs() <= SHAPE_TOL * s.x && s.x <= 0.1 + SHAPE_TOL;
        bad_shape += !ok as usize;
    }
    outcome(
        !rounds.is_empty() && spawned > 0 && violations == 0 && bad_shape == 0,
        format!("{} rounds: {violations} retained violators; {bad_shape} of {spawned} spawns break the disc shape laws", rounds.len()),
    )
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let mut differing = Vec::new();
    for name in ["trajectory.txt", "metrics.txt"] {
        if fs::read(a.join(name)).ok() != fs::read(b.join(name)).ok() {
            differing.push(name);
        }
    }
    outcome(differing.is_empty(), format!("byte-identical trajectory.txt and metrics.txt: differing {differing:?}"))
}

fn metrics_of(run: &RunOutput) -> (f64, f64) {
    let psnr = run.report.psnr.unwrap_or(f64::NAN);
    let acc = run.report.geometry.map_or(f64::NAN, |g| g.accuracy_ratio);
    (psnr, acc)
}

fn timed<F: FnOnce() -> Outcome>(f: F) -> (Outcome, f64) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed().as_secs_f64())
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a filter argument
    // that does not match "acceptance" skips the suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut suite = Suite { failed: Vec::new() };
    let tmp = tempfile::tempdir().expect("temp dir");

    let (o, secs) = timed(compose_identity);
    suite.report(1, "compose identity", Some(1.0), secs, o, true);
    let (o, secs) = timed(order_independence);
    suite.report(2, "order independence", Some(10.0), secs, o, true);
    let (o, secs) = timed(gradient_correctness);
    suite.report(3, "gradient correctness", Some(60.0), secs, o, true);
    let (o, secs) = timed(depth_culling);
    suite.report(4, "depth culling", Some(5.0), secs, o, true);
    let (o, secs) = timed(tsdf_oracle);
    suite.report(5, "TSDF oracle", Some(120.0), secs, o, true);
    let (o, secs) = timed(tracking_oracle);
    suite.report(6, "tracking oracle", Some(600.0), secs, o, true);

    let t = Instant::now();
    let first = tmp.path().join("desk_a");
    let run = desk_run(0.005, &first);
    let run_secs = t.elapsed().as_secs_f64();
    let (fine, fps) = match &run {
        Ok(run) => {
            let (o, secs) = timed(|| hybrid_gain(run));
            suite.report(7, "hybrid gain", Some(900.0), run_secs + secs, o, true);
            let (o, secs) = timed(|| lifecycle_invariants(run));
            suite.report(8, "lifecycle invariants", None, run_secs + secs, o, true);
            (Some(metrics_of(run)), Some(run.fps()))
        }
        Err(e) => {
            for (id, name) in [(7, "hybrid gain"), (8, "lifecycle invariants")] {
                suite.report(id, name, None, run_secs, outcome(false, format!("run failed: {e:#}")), true);
            }
            (None, None)
        }
    };
    drop(run);

    let t = Instant::now();
    let mut series = vec![(0.005f32, fine)];
    for voxel in [0.01f32, 0.02] {
        let out = tmp.path().join(format!("desk_{voxel}"));
        series.push((voxel, desk_run(voxel, &out).ok().map(|r| metrics_of(&r))));
    }
    let ok = series.iter().all(|(_, m)| m.is_some_and(|(p, a)| p.is_finite() && a.is_finite()));
    let monotone = ok
        && series.windows(2).all(|w| {
            let (a, b) = (w[0].1.unwrap(), w[1].1.unwrap());
            b.0 <= a.0 && b.1 <= a.1
        });
    let detail = series
        .iter()
        .map(|(v, m)| match m {
            Some((p, a)) => format!("{:.1} cm: {p:.2} dB / acc {a:.4}", v * 100.0),
            None => format!("{:.1} cm: failed", v * 100.0),
        })
        .collect::<Vec<_>>()
        .join("; ");
    // The 0.5 cm run is shared with criterion 7 and counts toward this budget.
    suite.report(9, "voxel-size monotonicity", Some(2700.0), t.elapsed().as_secs_f64() + run_secs, outcome(monotone, detail), true);

    let t = Instant::now();
    let second = tmp.path().join("desk_b");
    let o = match desk_run(0.005, &second) {
        Ok(_) => determinism(&first, &second),
        Err(e) => outcome(false, format!("second run failed: {e:#}")),
    };
    let secs = t.elapsed().as_secs_f64();
    suite.report(10, "determinism", None, secs, o, true);

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let o = match fps {
        Some(f) => outcome(
            f >= MIN_FPS,
            format!("{f:.2} fps end-to-end on 320x240 with delta_k 10, 20 iterations, {cores} hardware thread(s) (>= {MIN_FPS})"),
        ),
        None => outcome(false, "no run to time".into()),
    };
    suite.report(11, "throughput sanity", None, run_secs, o, false);

    if suite.failed.is_empty() {
        println!("acceptance: all required criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", suite.failed);
        std::process::exit(1);
    }
}
