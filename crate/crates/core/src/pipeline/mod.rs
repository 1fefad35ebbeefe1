//! Frame loop: tracking, fusion and raycasting on every frame, plus a
//! Gaussian round every `delta_k` frames.

mod config;

use std::thread::JoinHandle;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{parse_key_values, ConfigError, PipelineConfig};

use crate::geometry::{Frame, Intrinsics, Pose};
use crate::image::ColorImage;
use crate::lifecycle::{self, Keyframe, KeyframeStore};
use crate::splat::{self, Adam, GaussianSet, Gradients, RenderConfig};
use crate::tracking::{self, ModelPyramid, TrackingError};
use crate::tsdf::{SdfRender, TsdfError, TsdfVolume};

/// Gaussian parameters are kept in single precision.
pub type Scalar = f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset yielded no frames")]
    EmptyDataset,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("frame {frame}: {source}")]
    Tracking {
        frame: usize,
        #[source]
        source: TrackingError,
    },
    #[error("frame {frame}: intrinsics differ from the first frame")]
    IntrinsicsChanged { frame: usize },
    #[error(transparent)]
    Volume(#[from] TsdfError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Wall-clock cost of one frame in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub frame: usize,
    pub track_ms: f64,
    pub fuse_ms: f64,
    pub raycast_ms: f64,
    /// Time the frame loop spent on Gaussian work (dispatch and join only in
    /// parallel mode).
    pub optimize_ms: f64,
}

/// Bookkeeping for one Gaussian round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub frame: usize,
    pub before: usize,
    pub spawned: usize,
    pub removed: usize,
    pub after: usize,
    /// Retained Gaussians that still fail the removal criteria.
    pub violations: usize,
    pub mask_pixels: usize,
    /// Scales of the Gaussians as they were spawned.
    pub spawned_scales: Vec<Vector3<f32>>,
    /// Mean L1 over the selected views, one entry per iteration.
    pub losses: Vec<f64>,
    pub views: usize,
    pub elapsed_ms: f64,
}

/// A view used by the optimizer with its SDF render.
#[derive(Clone, Debug)]
pub struct View {
    pub pose: Pose<f64>,
    pub rgb: ColorImage<f32>,
    pub render: SdfRender,
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub poses: Vec<Pose<f64>>,
    pub timestamps: Vec<f64>,
    pub intrinsics: Intrinsics<f64>,
    pub gaussians: GaussianSet<Scalar>,
    pub volume: TsdfVolume,
    pub keyframes: Vec<Keyframe>,
    pub timings: Vec<FrameTiming>,
    pub rounds: Vec<RoundRecord>,
    /// Frames whose tracking failed and were fused at the previous pose.
    pub lost_frames: Vec<usize>,
}

/// Gaussian set and optimizer state; owned by whichever worker runs a round.
#[derive(Clone, Debug)]
struct GaussianState {
    set: GaussianSet<Scalar>,
    adam: Adam<Scalar>,
}

/// Everything a round needs, detached from the volume.
struct RoundJob {
    frame: usize,
    current: View,
    views: Vec<View>,
}

/// Settings a round reads.
#[derive(Clone)]
struct RoundSettings {
    iterations: usize,
    render: RenderConfig,
    lifecycle: lifecycle::LifecycleConfig,
    seed: u64,
    intrinsics: Intrinsics<f64>,
}

fn round_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Renders the Gaussians at `view` and composes them with its SDF colors.
pub fn composite_view(
    set: &GaussianSet<Scalar>,
    view: &View,
    intr: &Intrinsics<f64>,
    cfg: &RenderConfig,
) -> (ColorImage<Scalar>, splat::GaussianRender<Scalar>) {
    let g = splat::forward(set, &view.pose.cast(), &intr.cast(), &view.render.depth, cfg);
    (splat::compose(&view.render.color, &g), g)
}

/// `iterations` Adam steps on the mean L1 loss over `views`; returns the
/// loss before each step.
pub fn optimize_round(
    set: &mut GaussianSet<Scalar>,
    adam: &mut Adam<Scalar>,
    views: &[View],
    intr: &Intrinsics<f64>,
    iterations: usize,
    cfg: &RenderConfig,
) -> Vec<f64> {
    let k: Intrinsics<Scalar> = intr.cast();
    let inv_views = 1.0 / views.len().max(1) as Scalar;
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut grads = Gradients::zeros_like(set);
        let mut total = 0.0;
        for v in views {
            let pose = v.pose.cast();
            let g = splat::forward(set, &pose, &k, &v.render.depth, cfg);
            let comp = splat::compose(&v.render.color, &g);
            let mask = splat::loss_mask(&v.render.hit, &g.weight);
            let loss = splat::loss_l1(&comp, &v.rgb, &mask);
            total += loss.value as f64;
            if !set.is_empty() && loss.count > 0 {
                let gv = splat::backward(set, &pose, &k, &v.render.depth, &v.render.color, &g, &loss.grad, cfg);
                grads.add_scaled(&gv, inv_views);
            }
        }
        trace.push(total / views.len().max(1) as f64);
        if !set.is_empty() {
            adam.step(set, &grads);
        }
    }
    trace
}

fn run_round(state: &mut GaussianState, job: RoundJob, s: &RoundSettings) -> RoundRecord {
    let start = Instant::now();
    let before = state.set.len();
    let (comp, g) = composite_view(&state.set, &job.current, &s.intrinsics, &s.render);
    let mask = lifecycle::add_mask(&comp, &job.current.rgb, &g.weight, &job.current.render.hit, &s.lifecycle);
    let mut rng = round_rng(s.seed, job.frame, 1);
    let fresh = lifecycle::spawn::<Scalar, _>(
        &mask,
        &job.current.render.vertices,
        &job.current.render.normals,
        &job.current.rgb,
        s.render.sh_degree,
        &s.lifecycle,
        &mut rng,
    );
    let spawned_scales = fresh.iter().map(|g| g.scale()).collect();
    for g in &fresh {
        state.set.push(g);
    }
    state.adam.resize(state.set.len());
    let losses = optimize_round(&mut state.set, &mut state.adam, &job.views, &s.intrinsics, s.iterations, &s.render);
    let removed = lifecycle::remove(&mut state.set, Some(&mut state.adam), &s.lifecycle);
    let violations = lifecycle::removal_mask(&state.set, &s.lifecycle).iter().filter(|k| !**k).count();
    RoundRecord {
        frame: job.frame,
        before,
        spawned: fresh.len(),
        removed,
        after: state.set.len(),
        violations,
        mask_pixels: mask.count(),
        spawned_scales,
        losses,
        views: job.views.len(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Online reconstruction state. Feed frames in order with
/// [`Reconstructor::process_frame`], then call [`Reconstructor::finish`].
pub struct Reconstructor {
    cfg: PipelineConfig,
    settings: Option<RoundSettings>,
    volume: TsdfVolume,
    model: Option<ModelPyramid>,
    initial_pose: Pose<f64>,
    poses: Vec<Pose<f64>>,
    timestamps: Vec<f64>,
    keyframes: KeyframeStore,
    /// Frames of the current interval: (pose, rgb).
    recent: Vec<(Pose<f64>, ColorImage<f32>)>,
    state: Option<GaussianState>,
    pending: Option<JoinHandle<(GaussianState, RoundRecord)>>,
    timings: Vec<FrameTiming>,
    rounds: Vec<RoundRecord>,
    lost: Vec<usize>,
}

impl Reconstructor {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let volume = TsdfVolume::new(cfg.tsdf)?;
        let set = GaussianSet::new(cfg.render.sh_degree);
        let adam = Adam::for_set(&set, cfg.optimizer);
        Ok(Self {
            cfg,
            settings: None,
            volume,
            model: None,
            initial_pose: Pose::identity(),
            poses: Vec::new(),
            timestamps: Vec::new(),
            keyframes: KeyframeStore::default(),
            recent: Vec::new(),
            state: Some(GaussianState { set, adam }),
            pending: None,
            timings: Vec::new(),
            rounds: Vec::new(),
            lost: Vec::new(),
        })
    }

    /// Pose assigned to the first frame (identity by default).
    pub fn with_initial_pose(mut self, pose: Pose<f64>) -> Self {
        self.initial_pose = pose;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn volume(&self) -> &TsdfVolume {
        &self.volume
    }

    pub fn poses(&self) -> &[Pose<f64>] {
        &self.poses
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    /// Current Gaussians; waits for a running round first.
    pub fn gaussians(&mut self) -> &GaussianSet<Scalar> {
        self.join_pending();
        &self.state.as_ref().expect("state present after join").set
    }

    fn join_pending(&mut self) {
        if let Some(h) = self.pending.take() {
            let (state, record) = h.join().expect("gaussian worker panicked");
            self.state = Some(state);
            self.rounds.push(record);
        }
    }

    /// Tracks, fuses and raycasts one frame, running a Gaussian round when
    /// the frame index is a multiple of `delta_k`.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<FrameTiming, PipelineError> {
        let n = self.poses.len();
        let intr = frame.intrinsics;
        match &self.settings {
            None => {
                self.settings = Some(RoundSettings {
                    iterations: self.cfg.iterations,
                    render: self.cfg.render,
                    lifecycle: self.cfg.lifecycle,
                    seed: self.cfg.seed,
                    intrinsics: intr,
                })
            }
            Some(s) if s.intrinsics != intr => return Err(PipelineError::IntrinsicsChanged { frame: n }),
            _ => {}
        }
        let mut timing = FrameTiming {
            frame: n,
            ..Default::default()
        };

        let t = Instant::now();
        let pose = match &self.model {
            None => self.initial_pose,
            Some(model) => match tracking::track_frame(frame, model, &model.pose, &self.cfg.tracking) {
                Ok(r) => r.pose,
                Err(e) if self.cfg.continue_on_lost => {
                    if !matches!(e, TrackingError::Lost { .. } | TrackingError::TooFewCorrespondences(_) | TrackingError::Degenerate { .. }) {
                        return Err(PipelineError::Tracking { frame: n, source: e });
                    }
                    self.lost.push(n);
                    model.pose
                }
                Err(e) => return Err(PipelineError::Tracking { frame: n, source: e }),
            },
        };
        timing.track_ms = ms(t);

        let t = Instant::now();
        self.volume.allocate(frame, &pose)?;
        self.volume.integrate(frame, &pose);
        timing.fuse_ms = ms(t);

        let t = Instant::now();
        let render = self.volume.raycast(&pose, &intr);
        timing.raycast_ms = ms(t);

        self.poses.push(pose);
        self.timestamps.push(frame.timestamp);

        let t = Instant::now();
        if self.cfg.gaussians {
            self.keyframes.maybe_add(n, &pose, &frame.rgb, &self.cfg.lifecycle);
            self.recent.push((pose, frame.rgb.clone()));
            if n % self.cfg.delta_k == 0 {
                let current = View {
                    pose,
                    rgb: frame.rgb.clone(),
                    render: render.clone(),
                };
                self.dispatch_round(n, current, &intr);
            }
        }
        timing.optimize_ms = ms(t);

        self.model = Some(ModelPyramid::new(render, intr, pose, self.cfg.tracking.levels));
        self.timings.push(timing);
        Ok(timing)
    }

    /// Selects and refreshes the views, then runs the round inline or hands it
    /// to the worker thread.
    fn dispatch_round(&mut self, frame: usize, current: View, intr: &Intrinsics<f64>) {
        let mut rng = round_rng(self.cfg.seed, frame, 0);
        let recent = std::mem::take(&mut self.recent);
        let sel = lifecycle::select_views(self.keyframes.len(), recent.len(), &self.cfg.lifecycle, &mut rng);
        let mut views = Vec::with_capacity(sel.global.len() + sel.local.len());
        for &g in &sel.global {
            let kf = &mut self.keyframes.frames[g];
            let render = self.volume.raycast(&kf.pose, intr);
            kf.render = Some(render.clone());
            views.push(View {
                pose: kf.pose,
                rgb: kf.rgb.clone(),
                render,
            });
        }
        let last = recent.len() - 1;
        for (i, (pose, rgb)) in recent.into_iter().enumerate() {
            if !sel.local.contains(&i) {
                continue;
            }
            let render = if i == last {
                current.render.clone()
            } else {
                self.volume.raycast(&pose, intr)
            };
            views.push(View { pose, rgb, render });
        }
        let job = RoundJob { frame, current, views };
        let settings = self.settings.clone().expect("set on first frame");
        self.join_pending();
        let mut state = self.state.take().expect("state present after join");
        if self.cfg.parallel {
            self.pending = Some(std::thread::spawn(move || {
                let record = run_round(&mut state, job, &settings);
                (state, record)
            }));
        } else {
            let record = run_round(&mut state, job, &settings);
            self.state = Some(state);
            self.rounds.push(record);
        }
    }

    /// Waits for outstanding work and assembles the result.
    pub fn finish(mut self) -> Result<ReconResult, PipelineError> {
        self.join_pending();
        let Some(s) = self.settings else {
            return Err(PipelineError::EmptyDataset);
        };
        let state = self.state.expect("state present after join");
        Ok(ReconResult {
            poses: self.poses,
            timestamps: self.timestamps,
            intrinsics: s.intrinsics,
            gaussians: state.set,
            volume: self.volume,
            keyframes: self.keyframes.frames,
            timings: self.timings,
            rounds: self.rounds,
            lost_frames: self.lost,
        })
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the whole sequence.
pub fn run<E: std::fmt::Display>(
    frames: impl IntoIterator<Item = Result<Frame, E>>,
    cfg: &PipelineConfig,
    initial_pose: Pose<f64>,
) -> Result<ReconResult, PipelineError> {
    let mut rec = Reconstructor::new(cfg.clone())?.with_initial_pose(initial_pose);
    for f in frames {
        let f = f.map_err(|e| PipelineError::Dataset(e.to_string()))?;
        rec.process_frame(&f)?;
    }
    rec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::LearningRates;
    use crate::io::synthetic::{desk_scene, orbit};
    use nalgebra::Vector3;
    use std::convert::Infallible;

    fn small_scene(n: usize) -> crate::io::SyntheticSequence {
        let k = Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60, 1.0).unwrap();
        let traj = orbit(&Vector3::zeros(), 0.8, 0.45, 0.0, 0.5, n);
        desk_scene(k, traj).generate(1).unwrap()
    }

    fn cfg() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.tsdf.voxel_size = 0.02;
        c.iterations = 3;
        c
    }

    fn ok(frames: &[Frame]) -> impl Iterator<Item = Result<Frame, Infallible>> + '_ {
        frames.iter().cloned().map(Ok)
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let r = run(Vec::<Result<Frame, Infallible>>::new(), &cfg(), Pose::identity());
        assert!(matches!(r, Err(PipelineError::EmptyDataset)));
    }

    #[test]
    fn round_schedule() {
        let seq = small_scene(25);
        let r = run(ok(&seq.frames), &cfg(), seq.poses[0]).unwrap();
        assert_eq!(r.poses.len(), 25);
        assert_eq!(r.timings.len(), 25);
        assert_eq!(r.rounds.iter().map(|x| x.frame).collect::<Vec<_>>(), vec![0, 10, 20]);
        for x in &r.rounds {
            assert_eq!(x.losses.len(), 3);
            assert_eq!(x.after, x.before + x.spawned - x.removed);
        }
        let one = run(ok(&seq.frames[..1]), &cfg(), seq.poses[0]).unwrap();
        assert_eq!(one.rounds.len(), 1);
    }

    #[test]
    fn deterministic_and_parallel_agree() {
        let seq = small_scene(12);
        let a = run(ok(&seq.frames), &cfg(), seq.poses[0]).unwrap();
        let b = run(ok(&seq.frames), &cfg(), seq.poses[0]).unwrap();
        assert_eq!(a.poses, b.poses);
        assert_eq!(a.gaussians, b.gaussians);
        let p = run(ok(&seq.frames), &PipelineConfig { parallel: true, ..cfg() }, seq.poses[0]).unwrap();
        assert_eq!(a.poses, p.poses);
        assert_eq!(a.gaussians, p.gaussians);
    }

    #[test]
    fn gaussians_never_touch_the_volume() {
        let seq = small_scene(12);
        let a = run(ok(&seq.frames), &cfg(), seq.poses[0]).unwrap();
        let b = run(ok(&seq.frames), &PipelineConfig { gaussians: false, ..cfg() }, seq.poses[0]).unwrap();
        assert!(b.rounds.is_empty() && b.gaussians.is_empty());
        assert_eq!(a.poses, b.poses);
        assert_eq!(a.volume.block_count(), b.volume.block_count());
        for (x, y) in a.volume.blocks().iter().zip(b.volume.blocks()) {
            assert_eq!(x.coord, y.coord);
            assert!(x.voxels.iter().zip(y.voxels.iter()).all(|(p, q)| p == q));
        }
    }

    #[test]
    fn round_reduces_loss_on_a_color_defect() {
        let seq = small_scene(1);
        let mut rec = Reconstructor::new(PipelineConfig { gaussians: false, ..cfg() })
            .unwrap()
            .with_initial_pose(seq.poses[0]);
        rec.process_frame(&seq.frames[0]).unwrap();
        let k = seq.frames[0].intrinsics;
        let mut render = rec.volume().raycast(&seq.poses[0], &k);
        // Paint a dark square onto the SDF colors.
        for y in 20..40 {
            for x in 30..50 {
                if render.hit.at(x, y) {
                    render.color.set(x, y, Vector3::new(0.05, 0.05, 0.05));
                }
            }
        }
        let view = View {
            pose: seq.poses[0],
            rgb: seq.frames[0].rgb.clone(),
            render,
        };
        let mut state = GaussianState {
            set: GaussianSet::new(1),
            adam: Adam::new(splat::stride_for(1), LearningRates::default()),
        };
        let settings = RoundSettings {
            iterations: 20,
            render: RenderConfig::default(),
            lifecycle: lifecycle::LifecycleConfig::default(),
            seed: 0,
            intrinsics: k,
        };
        let rec = run_round(
            &mut state,
            RoundJob {
                frame: 0,
                current: view.clone(),
                views: vec![view],
            },
            &settings,
        );
        assert!(rec.spawned > 0);
        assert_eq!(rec.losses.len(), 20);
        assert!(rec.losses[19] < rec.losses[0], "{:?}", rec.losses);
    }

    #[test]
    fn empty_round_is_a_no_op() {
        let k = Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60, 1.0).unwrap();
        let pose = orbit(&Vector3::zeros(), 0.8, 0.45, 0.0, 0.5, 1)[0];
        // The generator's own render: the SDF colors match exactly, so
        // nothing is masked.
        let synth = desk_scene(k, vec![pose]).render(&pose);
        let view = View {
            pose,
            rgb: synth.rgb,
            render: synth.model,
        };
        let mut state = GaussianState {
            set: GaussianSet::new(1),
            adam: Adam::new(splat::stride_for(1), LearningRates::default()),
        };
        let settings = RoundSettings {
            iterations: 4,
            render: RenderConfig::default(),
            lifecycle: lifecycle::LifecycleConfig::default(),
            seed: 0,
            intrinsics: k,
        };
        let rec = run_round(
            &mut state,
            RoundJob {
                frame: 0,
                current: view.clone(),
                views: vec![view],
            },
            &settings,
        );
        assert_eq!((rec.spawned, rec.after), (0, 0));
        assert!(rec.losses.iter().all(|&l| l == rec.losses[0]));
    }
}
