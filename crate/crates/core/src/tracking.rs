//! Frame-to-model camera tracking by point-to-plane ICP.
//!
//! The current frame's vertices are matched by projective association against
//! the raycast of the model at the previous pose, then the pose is refined by
//! Gauss–Newton on a left-multiplied twist, coarse to fine.

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{back_project, build_pyramid, compute_normals, Frame, FramePyramid, GeometryError, GeometryMaps, Intrinsics, Pose, Twist};
use crate::tsdf::SdfRender;

/// Largest accepted ratio between the extreme eigenvalues of the system.
pub const MAX_CONDITION: f64 = 1e10;
/// Minimum correspondences for a 6-DOF solve.
pub const MIN_INLIERS: usize = 6;

const MAX_HALVINGS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("tracking lost: {inliers} inliers at the finest level")]
    Lost { last_pose: Pose<f64>, inliers: usize },
    #[error("degenerate geometry: condition number {condition:.3e}")]
    Degenerate { condition: f64 },
    #[error("too few correspondences ({0})")]
    TooFewCorrespondences(usize),
    #[error("invalid tracking configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpConfig {
    pub levels: usize,
    /// Iterations per level, coarsest first.
    pub iterations: Vec<usize>,
    /// Correspondence distance gate in meters.
    pub max_distance: f64,
    /// Normal angle gate in degrees.
    pub max_angle_deg: f64,
    /// Convergence threshold on the twist norm.
    pub epsilon: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: vec![4, 5, 10],
            max_distance: 0.1,
            max_angle_deg: 30.0,
            epsilon: 1e-6,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let bad = |m: &str| Err(TrackingError::InvalidConfig(m.into()));
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if self.iterations.len() != self.levels {
            return bad("need one iteration count per level");
        }
        if self.iterations.iter().any(|&n| n == 0) {
            return bad("iteration counts must be at least 1");
        }
        if !(self.max_distance > 0.0) || !(self.max_angle_deg > 0.0) {
            return bad("gates must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub pose: Pose<f64>,
    /// Mean absolute point-to-plane residual over the final inliers (meters).
    pub residual: f64,
    pub inlier_fraction: f64,
    pub converged: bool,
}

/// Raycast maps of the model at the previous pose, one per pyramid level.
#[derive(Clone, Debug)]
pub struct ModelPyramid {
    pub levels: Vec<SdfRender>,
    pub intrinsics: Vec<Intrinsics<f64>>,
    /// Pose the maps were rendered from.
    pub pose: Pose<f64>,
}

impl ModelPyramid {
    pub fn new(render: SdfRender, intrinsics: Intrinsics<f64>, pose: Pose<f64>, levels: usize) -> Self {
        let mut maps = vec![render];
        let mut intr = vec![intrinsics];
        for _ in 1..levels.max(1) {
            let next = maps.last().expect("level").downsampled();
            let k = intr.last().expect("level").downsampled();
            maps.push(next);
            intr.push(k);
        }
        Self {
            levels: maps,
            intrinsics: intr,
            pose,
        }
    }
}

/// One matched pair: the current point and the model plane it is pulled onto.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Current vertex in world coordinates under the current estimate.
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
    /// Unit model normal at the target.
    pub normal: Vector3<f64>,
}

impl Correspondence {
    #[inline]
    pub fn residual(&self) -> f64 {
        (self.source - self.target).dot(&self.normal)
    }

    /// Residual after moving the source by `delta` (applied on the left).
    #[inline]
    pub fn residual_after(&self, delta: &Pose<f64>) -> f64 {
        (delta.transform_point(&self.source) - self.target).dot(&self.normal)
    }
}

/// Gauss–Newton system `A ξ = -b` with the energy it was linearized at.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub a: Matrix6<f64>,
    pub b: Vector6<f64>,
    /// Sum of squared residuals.
    pub energy: f64,
    pub count: usize,
}

impl NormalEquations {
    fn zero() -> Self {
        Self {
            a: Matrix6::zeros(),
            b: Vector6::zeros(),
            energy: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.a += other.a;
        self.b += other.b;
        self.energy += other.energy;
        self.count += other.count;
    }

    pub fn condition_number(&self) -> f64 {
        let eig = SymmetricEigen::new(self.a);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Solves for the twist step; rejects ill-conditioned systems.
    pub fn solve(&self) -> Result<Twist<f64>, TrackingError> {
        let condition = self.condition_number();
        if !(condition <= MAX_CONDITION) {
            return Err(TrackingError::Degenerate { condition });
        }
        let chol = self
            .a
            .cholesky()
            .ok_or(TrackingError::Degenerate { condition })?;
        Ok(Twist(-chol.solve(&self.b)))
    }
}

const CHUNK: usize = 4096;

/// Accumulates the linearized point-to-plane system.
///
/// With a left perturbation `T ← exp(ξ)·T`, the Jacobian of each residual is
/// `[p × n, n]`. Partial sums over fixed chunks are added in order, so the
/// result does not depend on the thread count.
pub fn build_normal_equations(corr: &[Correspondence]) -> Result<NormalEquations, TrackingError> {
    if corr.len() < MIN_INLIERS {
        return Err(TrackingError::TooFewCorrespondences(corr.len()));
    }
    let partials: Vec<NormalEquations> = corr
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ne = NormalEquations::zero();
            for c in chunk {
                let r = c.residual();
                let rot = c.source.cross(&c.normal);
                let j = Vector6::new(rot.x, rot.y, rot.z, c.normal.x, c.normal.y, c.normal.z);
                ne.a += j * j.transpose();
                ne.b += j * r;
                ne.energy += r * r;
                ne.count += 1;
            }
            ne
        })
        .collect();
    let mut total = NormalEquations::zero();
    for p in &partials {
        total.add(p);
    }
    Ok(total)
}

/// Sum of squared residuals after applying `delta` to every source.
pub fn energy_after(corr: &[Correspondence], delta: &Pose<f64>) -> f64 {
    let partials: Vec<f64> = corr
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|c| c.residual_after(delta).powi(2)).sum())
        .collect();
    partials.iter().sum()
}

struct CurrentLevel {
    maps: GeometryMaps,
    usable: usize,
}

fn prepare(frame: &Frame) -> CurrentLevel {
    let maps = compute_normals(&back_project(frame));
    let usable = maps.normal_valid.count();
    CurrentLevel { maps, usable }
}

/// Projective data association against the model maps with distance and
/// normal-angle gates. Output order is row-major, independent of threads.
pub fn associate(
    current: &GeometryMaps,
    pose: &Pose<f64>,
    model: &SdfRender,
    model_intr: &Intrinsics<f64>,
    model_pose: &Pose<f64>,
    max_distance: f64,
    min_cos: f64,
) -> Vec<Correspondence> {
    let (w, h) = (current.width(), current.height());
    let to_prev = model_pose.inverse().compose(pose);
    let rows: Vec<Vec<Correspondence>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                if !current.normal_valid.at(x, y) {
                    continue;
                }
                let v = current.vertices.at(x, y).cast::<f64>();
                let n = current.normals.at(x, y).cast::<f64>();
                let Some(uv) = model_intr.project(&to_prev.transform_point(&v)) else {
                    continue;
                };
                let (u, vv) = (uv.x.round(), uv.y.round());
                if u < 0.0 || vv < 0.0 || u >= model.width() as f64 || vv >= model.height() as f64 {
                    continue;
                }
                let (mu, mv) = (u as usize, vv as usize);
                if !model.hit.at(mu, mv) {
                    continue;
                }
                let source = pose.transform_point(&v);
                let target = model.vertices.at(mu, mv).cast::<f64>();
                let normal = model.normals.at(mu, mv).cast::<f64>();
                if (source - target).norm() > max_distance {
                    continue;
                }
                if pose.rotate(&n).dot(&normal) < min_cos {
                    continue;
                }
                out.push(Correspondence { source, target, normal });
            }
            out
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// Estimates the current camera pose against the model raycast.
pub fn track(
    current: &FramePyramid,
    model: &ModelPyramid,
    init: &Pose<f64>,
    cfg: &IcpConfig,
) -> Result<TrackResult, TrackingError> {
    cfg.validate()?;
    let levels = cfg.levels.min(current.len()).min(model.levels.len());
    if levels == 0 {
        return Err(TrackingError::InvalidConfig("empty pyramid".into()));
    }
    let min_cos = cfg.max_angle_deg.to_radians().cos();
    let mut pose = *init;
    let lost = |inliers| TrackingError::Lost {
        last_pose: *init,
        inliers,
    };

    let first = cfg.iterations.len() - levels;
    for level in (0..levels).rev() {
        let cur = prepare(&current.levels[level]);
        let iters = cfg.iterations[first + (levels - 1 - level)];
        for _ in 0..iters {
            let corr = associate(
                &cur.maps,
                &pose,
                &model.levels[level],
                &model.intrinsics[level],
                &model.pose,
                cfg.max_distance,
                min_cos,
            );
            let ne = match build_normal_equations(&corr) {
                Ok(ne) => ne,
                Err(_) => break,
            };
            let step = match ne.solve() {
                Ok(s) => s,
                // Unconstrained directions: keep the estimate from this level.
                Err(TrackingError::Degenerate { .. }) => break,
                Err(e) => return Err(e),
            };
            let mut xi = step;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let delta = xi.exp();
                if energy_after(&corr, &delta) <= ne.energy {
                    accepted = Some(delta);
                    break;
                }
                xi = Twist(xi.0 * 0.5);
            }
            let Some(delta) = accepted else { break };
            pose = delta.compose(&pose).renormalized();
            if xi.norm() < cfg.epsilon {
                break;
            }
        }
    }

    let fine = prepare(&current.levels[0]);
    let corr = associate(
        &fine.maps,
        &pose,
        &model.levels[0],
        &model.intrinsics[0],
        &model.pose,
        cfg.max_distance,
        min_cos,
    );
    if corr.len() < MIN_INLIERS {
        return Err(lost(corr.len()));
    }
    let residual = corr.iter().map(|c| c.residual().abs()).sum::<f64>() / corr.len() as f64;
    let inlier_fraction = if fine.usable == 0 {
        0.0
    } else {
        (corr.len() as f64 / fine.usable as f64).min(1.0)
    };
    Ok(TrackResult {
        pose,
        residual,
        inlier_fraction,
        converged: inlier_fraction >= 0.1,
    })
}

/// Convenience wrapper building the current pyramid from a single frame.
pub fn track_frame(
    frame: &Frame,
    model: &ModelPyramid,
    init: &Pose<f64>,
    cfg: &IcpConfig,
) -> Result<TrackResult, TrackingError> {
    let pyr = build_pyramid(frame, cfg.levels)?;
    track(&pyr, model, init, cfg)
}
