use nalgebra::Vector3;
use rayon::prelude::*;

use super::{BlockCache, TsdfVolume, BLOCK_EDGE, SUPER_BLOCK};
use crate::geometry::{Intrinsics, Pose, MAX_DEPTH, MIN_DEPTH};
use crate::image::{ColorImage, DepthImage, Image, Mask, PointImage};

/// First rendering pass: what the SDF alone shows from one viewpoint.
#[derive(Clone, Debug)]
pub struct SdfRender {
    /// Interpolated voxel color `C_t`.
    pub color: ColorImage<f32>,
    /// Camera-space depth `D_t`; 0 on a miss.
    pub depth: DepthImage,
    /// World-space surface points.
    pub vertices: PointImage,
    /// World-space unit normals (pointing out of the surface).
    pub normals: PointImage,
    pub hit: Mask,
}

impl SdfRender {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Image::filled(width, height, Vector3::zeros()),
            depth: Image::filled(width, height, 0.0),
            vertices: Image::filled(width, height, Vector3::zeros()),
            normals: Image::filled(width, height, Vector3::zeros()),
            hit: Image::filled(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn hit_count(&self) -> usize {
        self.hit.count()
    }

    /// 2x2 reduction for coarse tracking levels: averages the hit samples of
    /// each block and renormalizes normals.
    pub fn downsampled(&self) -> Self {
        let (w, h) = (self.width() / 2, self.height() / 2);
        let mut out = Self::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut n = 0.0f32;
                let mut acc = (Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), 0.0f32);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if self.hit.at(sx, sy) {
                        n += 1.0;
                        acc.0 += self.vertices.at(sx, sy);
                        acc.1 += self.normals.at(sx, sy);
                        acc.2 += self.color.at(sx, sy);
                        acc.3 += self.depth.at(sx, sy);
                    }
                }
                let nl = acc.1.norm();
                if n > 0.0 && nl > 1e-6 {
                    out.vertices.set(x, y, acc.0 / n);
                    out.normals.set(x, y, acc.1 / nl);
                    out.color.set(x, y, acc.2 / n);
                    out.depth.set(x, y, acc.3 / n);
                    out.hit.set(x, y, true);
                }
            }
        }
        out
    }
}

enum Probe {
    /// The block containing the point is not allocated; `coarse` when its
    /// whole coarse cell is empty.
    NoBlock { coarse: bool },
    /// Block allocated but some of the eight voxels are unobserved.
    Unknown,
    Value(f32),
}

impl TsdfVolume {
    fn probe(&self, p: &Vector3<f32>, cache: &mut BlockCache) -> Probe {
        let g = (p / self.voxel_size).map(super::floor_i32);
        let b = super::block_of(&g);
        if !self.block_allocated(&b, cache) {
            let coarse = cache.dense.is_some_and(|d| !d.region_occupied(&b));
            return Probe::NoBlock { coarse };
        }
        match self.sample_cached(p, cache) {
            Some(s) => Probe::Value(s.tsdf),
            None => Probe::Unknown,
        }
    }

    fn tsdf_at(&self, p: &Vector3<f32>, cache: &mut BlockCache) -> Option<f32> {
        self.sample_cached(p, cache).map(|s| s.tsdf)
    }

    fn gradient(&self, p: &Vector3<f32>, f0: f32, cache: &mut BlockCache) -> Option<Vector3<f32>> {
        let h = self.voxel_size;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let fp = self.tsdf_at(&(p + e), cache);
            let fm = self.tsdf_at(&(p - e), cache);
            g[axis] = match (fp, fm) {
                (Some(a), Some(b)) => (a - b) / (2.0 * h),
                (Some(a), None) => (a - f0) / h,
                (None, Some(b)) => (f0 - b) / h,
                (None, None) => return None,
            };
        }
        Some(g)
    }

    /// Ray-marches every pixel for the first `+ → -` zero crossing.
    pub fn raycast(&self, pose: &Pose<f64>, intr: &Intrinsics<f64>) -> SdfRender {
        let (w, h) = (intr.width, intr.height);
        let mut out = SdfRender::empty(w, h);
        if self.is_empty() {
            return out;
        }
        let pose32 = pose.cast::<f32>();
        let k = intr.cast::<f32>();
        let dense = self.dense_index();
        let bounds = match &dense {
            Some(d) => d.bounds(self.voxel_size),
            None => [Vector3::repeat(f32::NEG_INFINITY), Vector3::repeat(f32::INFINITY)],
        };
        let rows: Vec<Vec<Option<RayHit>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut cache = BlockCache::with_dense(dense.as_ref());
                (0..w)
                    .map(|x| self.march(&pose32, &k, &bounds, x as f32, y as f32, &mut cache))
                    .collect()
            })
            .collect();
        for (y, row) in rows.into_iter().enumerate() {
            for (x, hit) in row.into_iter().enumerate() {
                if let Some(hit) = hit {
                    out.color.set(x, y, hit.color);
                    out.depth.set(x, y, hit.depth);
                    out.vertices.set(x, y, hit.point);
                    out.normals.set(x, y, hit.normal);
                    out.hit.set(x, y, true);
                }
            }
        }
        out
    }

    fn march(
        &self,
        pose: &Pose<f32>,
        k: &Intrinsics<f32>,
        bounds: &[Vector3<f32>; 2],
        u: f32,
        v: f32,
        cache: &mut BlockCache,
    ) -> Option<RayHit> {
        // Parametrize the ray by camera depth z so D_t falls out directly.
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let per_z = dir_cam.norm();
        let dir = pose.rotate(&dir_cam);
        let origin = pose.translation;
        let at = |z: f32| origin + dir * z;

        let fine = self.voxel_size / per_z;
        let coarse = 0.8 * self.truncation / per_z;
        let block_extent = self.voxel_size * BLOCK_EDGE as f32;

        let (enter, exit) = slab(&origin, &dir, bounds)?;
        let mut z = MIN_DEPTH.max(enter - fine);
        let end = MAX_DEPTH.min(exit + fine);
        // (z, tsdf) of the previous observed sample
        let mut prev: Option<(f32, f32)> = None;
        let mut last_step_fine = false;
        while z < end {
            let p = at(z);
            match self.probe(&p, cache) {
                Probe::NoBlock { coarse } => {
                    prev = None;
                    last_step_fine = false;
                    // Jump to just past the exit of this empty cell.
                    let extent = if coarse { block_extent * SUPER_BLOCK as f32 } else { block_extent };
                    let exit = block_exit(&p, &dir, extent);
                    z += (exit + 1e-4).max(fine);
                }
                Probe::Unknown => {
                    prev = None;
                    last_step_fine = false;
                    z += fine;
                }
                Probe::Value(f) => {
                    if f < 0.0 {
                        match prev {
                            Some((zp, fp)) if fp > 0.0 && last_step_fine => {
                                let zc = zp + (z - zp) * fp / (fp - f);
                                return self.surface_hit(&at(zc), zc, cache);
                            }
                            Some((zp, fp)) if fp > 0.0 => {
                                // Crossed with a coarse step: back up and refine.
                                z = zp + fine;
                                prev = Some((zp, fp));
                                last_step_fine = true;
                                continue;
                            }
                            _ => return None,
                        }
                    }
                    prev = Some((z, f));
                    // |tsdf|·μ bounds the distance to the surface.
                    let step = if f >= 1.0 { coarse } else { 0.8 * f * self.truncation / per_z };
                    if step > fine {
                        z += step;
                        last_step_fine = false;
                    } else {
                        z += fine;
                        last_step_fine = true;
                    }
                }
            }
        }
        None
    }

    fn surface_hit(&self, p: &Vector3<f32>, depth: f32, cache: &mut BlockCache) -> Option<RayHit> {
        let s = self.sample_cached(p, cache)?;
        let g = self.gradient(p, s.tsdf, cache)?;
        let len = g.norm();
        if !(len > 1e-12) || !depth.is_finite() {
            return None;
        }
        Some(RayHit {
            point: *p,
            normal: g / len,
            color: s.color,
            depth,
        })
    }
}

struct RayHit {
    point: Vector3<f32>,
    normal: Vector3<f32>,
    color: Vector3<f32>,
    depth: f32,
}

/// Entry and exit ray parameters of an axis-aligned box.
fn slab(origin: &Vector3<f32>, dir: &Vector3<f32>, bounds: &[Vector3<f32>; 2]) -> Option<(f32, f32)> {
    let (mut t0, mut t1) = (f32::NEG_INFINITY, f32::INFINITY);
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if origin[i] < bounds[0][i] || origin[i] > bounds[1][i] {
                return None;
            }
            continue;
        }
        let a = (bounds[0][i] - origin[i]) / dir[i];
        let b = (bounds[1][i] - origin[i]) / dir[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t1 > 0.0).then_some((t0, t1))
}

/// Ray parameter (per unit of `dir`) at which the ray leaves the grid cell
/// containing `p`.
fn block_exit(p: &Vector3<f32>, dir: &Vector3<f32>, extent: f32) -> f32 {
    let mut t = f32::INFINITY;
    for i in 0..3 {
        let lo = super::floor_i32(p[i] / extent) as f32 * extent;
        if dir[i] > 1e-9 {
            t = t.min((lo + extent - p[i]) / dir[i]);
        } else if dir[i] < -1e-9 {
            t = t.min((lo - p[i]) / dir[i]);
        }
    }
    t.max(0.0)
}
