//! Gaussian population control: where to add, how to initialize, which views
//! to optimize against, and what to delete.

use std::collections::HashMap;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::Rng;

use crate::geometry::Pose;
use crate::image::{ColorImage, Image, Mask, PointImage};
use crate::scalar::{logit, Real};
use crate::splat::{sh, Adam, Gaussian, GaussianSet};
use crate::tsdf::SdfRender;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifecycleConfig {
    /// Per-channel color error above which a pixel needs help.
    pub color_threshold: f64,
    /// Gaussian weight below which a pixel counts as under-covered.
    pub weight_threshold: f64,
    /// Fraction of masked pixels that spawn a Gaussian.
    pub sample_fraction: f64,
    pub keyframe_angle_deg: f64,
    pub keyframe_translation: f64,
    pub n_global: usize,
    pub n_local: usize,
    /// Remove below this opacity.
    pub min_opacity: f64,
    /// Remove when the largest scale exceeds this (meters).
    pub max_scale: f64,
    /// Remove when the largest scale is below this (meters).
    pub min_scale: f64,
    pub initial_opacity: f64,
    /// Cap on the initial in-plane scale (meters).
    pub max_init_scale: f64,
    /// In-plane scale used when a sample has fewer than three neighbors.
    pub fallback_scale: f64,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            color_threshold: 0.05,
            weight_threshold: 4.0,
            sample_fraction: 0.25,
            keyframe_angle_deg: 30.0,
            keyframe_translation: 0.3,
            n_global: 4,
            n_local: 2,
            min_opacity: 0.005,
            max_scale: 0.1,
            min_scale: 0.003,
            initial_opacity: 0.5,
            max_init_scale: 0.1,
            fallback_scale: 0.01,
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("color_threshold", self.color_threshold),
            ("weight_threshold", self.weight_threshold),
            ("keyframe_angle_deg", self.keyframe_angle_deg),
            ("keyframe_translation", self.keyframe_translation),
            ("min_opacity", self.min_opacity),
            ("max_scale", self.max_scale),
            ("min_scale", self.min_scale),
            ("max_init_scale", self.max_init_scale),
            ("fallback_scale", self.fallback_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err("sample_fraction must be in (0, 1]".into());
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err("initial_opacity must be in (0, 1)".into());
        }
        if self.min_scale >= self.max_scale {
            return Err("min_scale must be below max_scale".into());
        }
        Ok(())
    }
}

/// Pixels with a visible color error that Gaussians do not yet cover.
/// Only SDF-hit pixels are considered.
pub fn add_mask<T: Real>(
    composite: &ColorImage<T>,
    target: &ColorImage<f32>,
    weight: &Image<T>,
    hit: &Mask,
    cfg: &LifecycleConfig,
) -> Mask {
    assert!(composite.same_shape(target) && composite.same_shape(weight) && composite.same_shape(hit));
    let data = (0..composite.len())
        .map(|i| {
            if !hit.as_slice()[i] {
                return false;
            }
            let c = composite.as_slice()[i];
            let t = target.as_slice()[i];
            let err = (0..3)
                .map(|ch| (c[ch].as_f64() - t[ch] as f64).abs())
                .fold(0.0, f64::max);
            err > cfg.color_threshold && weight.as_slice()[i].as_f64() < cfg.weight_threshold
        })
        .collect();
    Image::from_vec(composite.width(), composite.height(), data).expect("same size")
}

/// Masked pixels ordered by 2×2 cell (cells row-major, pixels row-major
/// inside a cell), so that evenly spaced picks spread over the image.
fn cell_order(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::with_capacity(mask.count());
    for cy in (0..h).step_by(2) {
        for cx in (0..w).step_by(2) {
            for y in cy..(cy + 2).min(h) {
                for x in cx..(cx + 2).min(w) {
                    if mask.at(x, y) {
                        out.push((x, y));
                    }
                }
            }
        }
    }
    out
}

/// Systematic sample of exactly `ceil(fraction · |mask|)` masked pixels with
/// a random start.
pub fn sample_pixels<R: Rng>(mask: &Mask, fraction: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let all = cell_order(mask);
    let m = all.len();
    if m == 0 {
        return Vec::new();
    }
    let n = ((fraction * m as f64).ceil() as usize).clamp(1, m);
    let stride = m as f64 / n as f64;
    let start: f64 = rng.random_range(0.0..stride);
    (0..n)
        .map(|k| all[((start + k as f64 * stride) as usize).min(m - 1)])
        .collect()
}

/// Exact k-nearest-neighbor queries on a uniform hash grid.
pub struct PointGrid {
    cell: f64,
    points: Vec<Vector3<f64>>,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl PointGrid {
    pub fn new(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let c = Self::key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        Self {
            cell,
            points,
            cells,
            lo,
            hi,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Distances to the `k` nearest points other than `skip`, ascending.
    pub fn nearest(&self, q: &Vector3<f64>, k: usize, skip: usize) -> Vec<f64> {
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let c = Self::key(q, self.cell);
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        for ring in 0..=max_ring {
            let span = |a: usize| (-ring).max(self.lo[a] - c[a])..=ring.min(self.hi[a] - c[a]);
            for dz in span(2) {
                for dy in span(1) {
                    for dx in span(0) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &i in ids {
                            if i as usize == skip {
                                continue;
                            }
                            let d = (self.points[i as usize] - q).norm();
                            if best.len() < k || d < best[k - 1] {
                                let pos = best.partition_point(|&b| b <= d);
                                best.insert(pos, d);
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            // Everything outside this ring is at least `ring · cell` away.
            if best.len() == k && best[k - 1] <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Quaternion that maps the local z axis onto `n`.
pub fn align_z_to(n: &Vector3<f64>) -> UnitQuaternion<f64> {
    let n = n.normalize();
    UnitQuaternion::rotation_between(&Vector3::z(), &n)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
}

/// New Gaussians at a sample of the masked pixels, initialized as thin discs
/// lying in the surface.
pub fn spawn<T: Real, R: Rng>(
    mask: &Mask,
    vertices: &PointImage,
    normals: &PointImage,
    target: &ColorImage<f32>,
    sh_degree: usize,
    cfg: &LifecycleConfig,
    rng: &mut R,
) -> Vec<Gaussian<T>> {
    let picks = sample_pixels(mask, cfg.sample_fraction, rng);
    if picks.is_empty() {
        return Vec::new();
    }
    let masked = cell_order(mask);
    let index: HashMap<(usize, usize), usize> = masked.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let points: Vec<Vector3<f64>> = masked
        .iter()
        .map(|&(x, y)| vertices.at(x, y).cast::<f64>())
        .collect();
    let grid = PointGrid::new(points, 0.02);
    let k = crate::splat::sh_coeffs(sh_degree);
    picks
        .iter()
        .map(|&(x, y)| {
            let p = vertices.at(x, y).cast::<f64>();
            let near = grid.nearest(&p, 3, index[&(x, y)]);
            let s1 = if near.len() < 3 {
                cfg.fallback_scale
            } else {
                (near.iter().map(|d| d * d).sum::<f64>() / 3.0).sqrt()
            };
            let s1 = s1.min(cfg.max_init_scale).max(cfg.min_scale);
            let s3 = 0.1 * s1;
            let q = align_z_to(&normals.at(x, y).cast::<f64>());
            let rgb = target.at(x, y).cast::<f64>();
            let mut coeffs = vec![Vector3::zeros(); k];
            coeffs[0] = sh::rgb_to_sh0(&rgb);
            let g = Gaussian {
                position: p,
                log_scale: Vector3::new(s1.ln(), s1.ln(), s3.ln()),
                rotation: Quaternion::new(q.w, q.i, q.j, q.k),
                raw_opacity: logit(cfg.initial_opacity),
                sh: coeffs,
            };
            Gaussian {
                position: g.position.map(T::lit),
                log_scale: g.log_scale.map(T::lit),
                rotation: Quaternion::new(T::lit(q.w), T::lit(q.i), T::lit(q.j), T::lit(q.k)),
                raw_opacity: T::lit(g.raw_opacity),
                sh: g.sh.iter().map(|c| c.map(T::lit)).collect(),
            }
        })
        .collect()
}

/// Whether `pose` is far enough from the last keyframe to become one.
pub fn is_new_keyframe(pose: &Pose<f64>, last: &Pose<f64>, cfg: &LifecycleConfig) -> bool {
    let rel = last.inverse().compose(pose);
    rel.rotation_angle().to_degrees() > cfg.keyframe_angle_deg || rel.translation.norm() > cfg.keyframe_translation
}

/// A stored optimization view.
#[derive(Clone, Debug)]
pub struct Keyframe {
    pub index: usize,
    pub pose: Pose<f64>,
    pub rgb: ColorImage<f32>,
    /// SDF render; refreshed whenever the view is selected.
    pub render: Option<SdfRender>,
}

/// Keyframe store with the predicate above.
#[derive(Clone, Debug, Default)]
pub struct KeyframeStore {
    pub frames: Vec<Keyframe>,
}

impl KeyframeStore {
    /// Adds the frame if it qualifies (the first frame always does).
    pub fn maybe_add(&mut self, index: usize, pose: &Pose<f64>, rgb: &ColorImage<f32>, cfg: &LifecycleConfig) -> bool {
        let add = match self.frames.last() {
            None => true,
            Some(kf) => is_new_keyframe(pose, &kf.pose, cfg),
        };
        if add {
            self.frames.push(Keyframe {
                index,
                pose: *pose,
                rgb: rgb.clone(),
                render: None,
            });
        }
        add
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSelection {
    /// Indices into the keyframe history, ascending.
    pub global: Vec<usize>,
    /// Indices into the recent-frame interval, ascending.
    pub local: Vec<usize>,
}

/// Random global keyframes plus evenly spaced frames of the current interval.
pub fn select_views<R: Rng>(keyframes: usize, recent: usize, cfg: &LifecycleConfig, rng: &mut R) -> ViewSelection {
    let mut global = if keyframes <= cfg.n_global {
        (0..keyframes).collect()
    } else {
        sample(rng, keyframes, cfg.n_global).into_vec()
    };
    global.sort_unstable();
    let n = cfg.n_local.min(recent);
    let mut local: Vec<usize> = (0..n).map(|k| (k + 1) * recent / n - 1).collect();
    local.dedup();
    ViewSelection { global, local }
}

/// Which Gaussians fail the removal criteria.
pub fn removal_mask<T: Real>(set: &GaussianSet<T>, cfg: &LifecycleConfig) -> Vec<bool> {
    (0..set.len())
        .map(|i| {
            let o = set.opacity(i).as_f64();
            let s = set.scale(i).map(|v| v.as_f64()).max();
            !(o < cfg.min_opacity || s > cfg.max_scale || s < cfg.min_scale)
        })
        .collect()
}

/// Deletes failing Gaussians from the set and the optimizer state; returns
/// how many were removed.
pub fn remove<T: Real>(set: &mut GaussianSet<T>, adam: Option<&mut Adam<T>>, cfg: &LifecycleConfig) -> usize {
    let keep = removal_mask(set, cfg);
    let removed = keep.iter().filter(|k| !**k).count();
    if removed > 0 {
        set.retain(&keep);
        if let Some(a) = adam {
            if a.len() == keep.len() {
                a.retain(&keep);
            }
        }
    }
    removed
}
