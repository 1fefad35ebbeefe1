//! Image, trajectory and geometry metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{is_valid_depth, Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage, Image, Mask};
use crate::scalar::Real;
use crate::tsdf::TriangleMesh;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty evaluation mask")]
    EmptyMask,
    #[error("image shapes differ")]
    ShapeMismatch,
    #[error("image smaller than the {0}x{0} SSIM window")]
    TooSmall(usize),
    #[error("trajectories differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two poses")]
    TooFewPoses,
    #[error("no {0} samples left after visibility filtering")]
    NothingVisible(&'static str),
}

fn check<A, B>(a: &Image<A>, b: &Image<B>, mask: &Mask) -> Result<(), EvalError> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(EvalError::ShapeMismatch);
    }
    if mask.count() == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(())
}

/// `10·log10(1/MSE)` over the masked pixels of `[0,1]` images, capped.
pub fn psnr<A: Real, B: Real>(a: &ColorImage<A>, b: &ColorImage<B>, mask: &Mask) -> Result<f64, EvalError> {
    check(a, b, mask)?;
    let mut sum = 0.0;
    for i in 0..a.len() {
        if mask.as_slice()[i] {
            let (p, q) = (a.as_slice()[i], b.as_slice()[i]);
            for c in 0..3 {
                let d = p[c].as_f64() - q[c].as_f64();
                sum += d * d;
            }
        }
    }
    let mse = sum / (3 * mask.count()) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filter over "valid" windows: output is (w-10)×(h-10).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// channels and over the windows whose center pixel is masked.
pub fn ssim<A: Real, B: Real>(a: &ColorImage<A>, b: &ColorImage<B>, mask: &Mask) -> Result<f64, EvalError> {
    check(a, b, mask)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall(SSIM_WINDOW));
    }
    let k = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let centers: Vec<usize> = (0..ow * oh)
        .filter(|&i| mask.at(i % ow + r, i / ow + r))
        .collect();
    if centers.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let per_channel: Vec<f64> = (0..3)
        .into_par_iter()
        .map(|c| {
            let x: Vec<f64> = a.as_slice().iter().map(|p| p[c].as_f64()).collect();
            let y: Vec<f64> = b.as_slice().iter().map(|p| p[c].as_f64()).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|s| filter_valid(s, w, h, &k));
            let total: f64 = centers
                .iter()
                .map(|&i| {
                    let (ma, mb) = (mx[i], my[i]);
                    let va = sxx[i] - ma * ma;
                    let vb = syy[i] - mb * mb;
                    let cov = sxy[i] - ma * mb;
                    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
                })
                .sum();
            total / centers.len() as f64
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / 3.0)
}

/// Rigid transform (no scale) minimizing Σ‖R·src + t − dst‖².
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose<f64> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * vt;
    Pose {
        rotation: r,
        translation: cd - r * cs,
    }
}

/// RMSE of camera positions after rigidly aligning `estimated` onto `truth`.
pub fn ate_rmse(estimated: &[Pose<f64>], truth: &[Pose<f64>]) -> Result<f64, EvalError> {
    if estimated.len() != truth.len() {
        return Err(EvalError::LengthMismatch(estimated.len(), truth.len()));
    }
    if estimated.len() < 2 {
        return Err(EvalError::TooFewPoses);
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(|p| p.translation).collect();
    let dst: Vec<Vector3<f64>> = truth.iter().map(|p| p.translation).collect();
    let t = align_rigid(&src, &dst);
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (t.transform_point(s) - d).norm_squared())
        .sum();
    Ok((sq / src.len() as f64).sqrt())
}

/// Closest point on triangle `abc` to `p` by Voronoi region tests.
pub fn closest_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Uniform grid over triangle bounding boxes for exact point-to-mesh
/// distance queries.
pub struct MeshDistance<'a> {
    mesh: &'a TriangleMesh,
    cell: f64,
    cells: std::collections::HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a TriangleMesh, cell: f64) -> Self {
        let mut cells: std::collections::HashMap<[i64; 3], Vec<u32>> = Default::default();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        let key = |v: f64| (v / cell).floor() as i64;
        for f in 0..mesh.faces.len() {
            let t = mesh.triangle(f);
            let mn = t[0].inf(&t[1]).inf(&t[2]);
            let mx = t[0].sup(&t[1]).sup(&t[2]);
            let (a, b) = (
                [key(mn.x as f64), key(mn.y as f64), key(mn.z as f64)],
                [key(mx.x as f64), key(mx.y as f64), key(mx.z as f64)],
            );
            for ax in 0..3 {
                lo[ax] = lo[ax].min(a[ax]);
                hi[ax] = hi[ax].max(b[ax]);
            }
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        cells.entry([x, y, z]).or_default().push(f as u32);
                    }
                }
            }
        }
        Self { mesh, cell, cells, lo, hi }
    }

    /// Distance to the nearest triangle; infinite for an empty mesh.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        if self.mesh.faces.is_empty() {
            return f64::INFINITY;
        }
        let c = [
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        ];
        // Rings needed to cover the whole grid from `c`.
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
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
                        for &f in ids {
                            let [a, b, cc] = self.mesh.triangle(f as usize).map(|v| v.cast::<f64>());
                            let d = (closest_on_triangle(p, &a, &b, &cc) - p).norm();
                            best = best.min(d);
                        }
                    }
                }
            }
            if best <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh<R: Rng>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_normal(f).cast::<f64>().norm() * 0.5;
        cdf.push(acc);
    }
    if acc <= 0.0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(f).map(|v| v.cast::<f64>());
            let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            a + (b - a) * r1 + (c - a) * r2
        })
        .collect()
}

/// A camera that observed the scene.
#[derive(Clone, Copy, Debug)]
pub struct Viewpoint<'a> {
    pub pose: Pose<f64>,
    pub intrinsics: Intrinsics<f64>,
    /// Observed depth; enables the occlusion test when present.
    pub depth: Option<&'a DepthImage>,
}

impl Viewpoint<'_> {
    /// Inside the frustum and, with depth, not hidden behind the observed
    /// surface by more than `tolerance`.
    pub fn sees(&self, p: &Vector3<f64>, tolerance: f64) -> bool {
        let c = self.pose.inverse_transform_point(p);
        if !is_valid_depth(c.z as f32) {
            return false;
        }
        let Some(uv) = self.intrinsics.project(&c) else {
            return false;
        };
        let (u, v) = (uv.x.round(), uv.y.round());
        if u < 0.0 || v < 0.0 || u >= self.intrinsics.width as f64 || v >= self.intrinsics.height as f64 {
            return false;
        }
        match self.depth {
            None => true,
            Some(d) => {
                let z = d.at(u as usize, v as usize) as f64;
                z > 0.0 && c.z <= z + tolerance
            }
        }
    }
}

/// Uniform samples over the valid pixels of the given depth views,
/// back-projected to world space.
pub fn sample_depth_views<R: Rng>(views: &[Viewpoint], n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
    let mut pixels: Vec<(usize, usize)> = Vec::new();
    for (vi, v) in views.iter().enumerate() {
        if let Some(d) = v.depth {
            pixels.extend(d.as_slice().iter().enumerate().filter(|(_, z)| **z > 0.0).map(|(i, _)| (vi, i)));
        }
    }
    if pixels.is_empty() {
        return Vec::new();
    }
    let picks: Vec<usize> = if pixels.len() <= n {
        (0..pixels.len()).collect()
    } else {
        let mut p = sample(rng, pixels.len(), n).into_vec();
        p.sort_unstable();
        p
    };
    picks
        .into_iter()
        .map(|k| {
            let (vi, i) = pixels[k];
            let v = &views[vi];
            let d = v.depth.expect("depth view");
            let (x, y) = (i % d.width(), i / d.width());
            let c = v.intrinsics.unproject(x as f64, y as f64, d.at(x, y) as f64);
            v.pose.transform_point(&c)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryConfig {
    pub threshold: f64,
    pub samples: usize,
    pub seed: u64,
    /// Slack for the occlusion test.
    pub visibility_tolerance: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            threshold: 0.03,
            samples: 10_000,
            seed: 0,
            visibility_tolerance: 0.03,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryReport {
    pub accuracy: f64,
    pub completion: f64,
    pub accuracy_ratio: f64,
    pub completion_ratio: f64,
}

/// Accuracy and completion of `mesh` against a reference surface.
///
/// `reference` holds points on the reference surface and
/// `reference_distance` measures distance to it. Mesh samples must lie in
/// some viewpoint's frustum; reference points must additionally be
/// unoccluded in a viewpoint that carries depth.
pub fn geometry_ratios(
    mesh: &TriangleMesh,
    reference: &[Vector3<f64>],
    reference_distance: &(dyn Fn(&Vector3<f64>) -> f64 + Sync),
    views: &[Viewpoint],
    cfg: &GeometryConfig,
) -> Result<GeometryReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let in_frustum = |p: &Vector3<f64>| views.is_empty() || views.iter().any(|v| Viewpoint { depth: None, ..*v }.sees(p, 0.0));
    let visible = |p: &Vector3<f64>| views.is_empty() || views.iter().any(|v| v.sees(p, cfg.visibility_tolerance));
    let mesh_pts: Vec<Vector3<f64>> = sample_mesh(mesh, cfg.samples, &mut rng)
        .into_par_iter()
        .filter(|p| in_frustum(p))
        .collect();
    if mesh_pts.is_empty() {
        return Err(EvalError::NothingVisible("mesh"));
    }
    let mut ref_pts: Vec<Vector3<f64>> = reference.par_iter().copied().filter(|p| visible(p)).collect();
    if ref_pts.len() > cfg.samples {
        let mut idx = sample(&mut rng, ref_pts.len(), cfg.samples).into_vec();
        idx.sort_unstable();
        ref_pts = idx.into_iter().map(|i| ref_pts[i]).collect();
    }
    if ref_pts.is_empty() {
        return Err(EvalError::NothingVisible("reference"));
    }
    let acc: Vec<f64> = mesh_pts.par_iter().map(|p| reference_distance(p)).collect();
    let index = MeshDistance::new(mesh, 0.05);
    let comp: Vec<f64> = ref_pts.par_iter().map(|p| index.distance(p)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = |v: &[f64]| v.iter().filter(|d| **d < cfg.threshold).count() as f64 / v.len() as f64;
    Ok(GeometryReport {
        accuracy: mean(&acc),
        completion: mean(&comp),
        accuracy_ratio: ratio(&acc),
        completion_ratio: ratio(&comp),
    })
}

/// All metrics of one evaluation; missing entries print as `nan`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ate_rmse: Option<f64>,
    pub geometry: Option<GeometryReport>,
}

pub const METRIC_KEYS: [&str; 7] = ["psnr_db", "ssim", "ate_rmse_m", "acc_m", "comp_m", "acc_ratio_3cm", "comp_ratio_3cm"];

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        let g = self.geometry;
        [
            self.psnr,
            self.ssim,
            self.ate_rmse,
            g.map(|g| g.accuracy),
            g.map(|g| g.completion),
            g.map(|g| g.accuracy_ratio),
            g.map(|g| g.completion_ratio),
        ]
    }

    fn fmt(v: Option<f64>) -> String {
        v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in METRIC_KEYS.iter().zip(self.values()) {
            writeln!(s, "{k}: {}", Self::fmt(v)).expect("string write");
        }
        s
    }

    /// Header line and one data row.
    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self.values().iter().map(|v| Self::fmt(*v)).collect();
        format!("{}\n{}\n", METRIC_KEYS.join(","), row.join(","))
    }

    /// Parses [`MetricReport::to_text`] output.
    pub fn parse_text(text: &str) -> Option<Self> {
        let mut vals = [None; 7];
        for line in text.lines() {
            let (k, v) = line.split_once(':')?;
            let i = METRIC_KEYS.iter().position(|m| *m == k.trim())?;
            let v: f64 = v.trim().parse().ok()?;
            vals[i] = (!v.is_nan()).then_some(v);
        }
        let geometry = match (vals[3], vals[4], vals[5], vals[6]) {
            (Some(a), Some(b), Some(c), Some(d)) => Some(GeometryReport {
                accuracy: a,
                completion: b,
                accuracy_ratio: c,
                completion_ratio: d,
            }),
            _ => None,
        };
        Some(Self {
            psnr: vals[0],
            ssim: vals[1],
            ate_rmse: vals[2],
            geometry,
        })
    }
}
