use nalgebra::Vector3;
use rayon::prelude::*;

use super::project::{project, Splat2D};
use super::{GaussianSet, RenderConfig};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage, Image, Mask};
use crate::scalar::Real;

/// Tile edge in pixels; tiles are the unit of forward parallelism.
pub const TILE: usize = 16;

/// Unnormalized Gaussian color and weight sums per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRender<T: Real> {
    pub color: ColorImage<T>,
    pub weight: Image<T>,
}

impl<T: Real> GaussianRender<T> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Image::filled(width, height, Vector3::zeros()),
            weight: Image::filled(width, height, T::zero()),
        }
    }
}

/// Projects every Gaussian in parallel; culled entries are `None`.
pub(crate) fn project_all<T: Real>(
    set: &GaussianSet<T>,
    pose: &Pose<T>,
    intr: &Intrinsics<T>,
    cfg: &RenderConfig,
) -> Vec<Option<Splat2D<T>>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| project(set.raw(i), pose, intr, cfg))
        .collect()
}

/// Whether a splat at `depth` survives the depth test against the SDF depth
/// `sdf` (0 meaning no surface) with slack `eps`.
#[inline]
pub(crate) fn passes_depth_test(depth: f64, sdf: f32, eps: f64) -> bool {
    sdf <= 0.0 || depth < sdf as f64 + eps
}

/// Accumulates `C_G` and `W_G`.
///
/// Splats are binned to 16×16 tiles in index order and each tile is summed in
/// double precision by one task, so the output is identical for any thread
/// count and differs across Gaussian permutations only by rounding.
pub fn forward<T: Real>(
    set: &GaussianSet<T>,
    pose: &Pose<T>,
    intr: &Intrinsics<T>,
    sdf_depth: &DepthImage,
    cfg: &RenderConfig,
) -> GaussianRender<T> {
    let (w, h) = (intr.width, intr.height);
    assert_eq!((sdf_depth.width(), sdf_depth.height()), (w, h), "depth size");
    let splats = project_all(set, pose, intr, cfg);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        if let Some(s) = s {
            let [x0, y0, x1, y1] = s.bounds;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    bins[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    let cutoff = cfg.alpha_cutoff;
    let tiles: Vec<[(Vector3<f64>, f64); TILE * TILE]> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let mut acc = [(Vector3::zeros(), 0.0f64); TILE * TILE];
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let (px0, py0) = (tx * TILE, ty * TILE);
            let (px1, py1) = ((px0 + TILE).min(w) - 1, (py0 + TILE).min(h) - 1);
            for &i in bin {
                let s = splats[i as usize].as_ref().expect("binned splat");
                let depth = s.depth.as_f64();
                let color = s.color.map(|c| c.as_f64());
                let [x0, y0, x1, y1] = s.bounds;
                for y in y0.max(py0)..=y1.min(py1) {
                    for x in x0.max(px0)..=x1.min(px1) {
                        if !passes_depth_test(depth, sdf_depth.at(x, y), cfg.epsilon) {
                            continue;
                        }
                        let a = s.alpha_at(T::from_usize_lossy(x), T::from_usize_lossy(y)).as_f64();
                        if a < cutoff {
                            continue;
                        }
                        let slot = &mut acc[(y - py0) * TILE + (x - px0)];
                        slot.0 += color * a;
                        slot.1 += a;
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = GaussianRender::empty(w, h);
    for (t, acc) in tiles.iter().enumerate() {
        let (px0, py0) = ((t % tiles_x) * TILE, (t / tiles_x) * TILE);
        for ly in 0..TILE.min(h - py0) {
            for lx in 0..TILE.min(w - px0) {
                let (c, a) = acc[ly * TILE + lx];
                out.color.set(px0 + lx, py0 + ly, c.map(T::lit));
                out.weight.set(px0 + lx, py0 + ly, T::lit(a));
            }
        }
    }
    out
}

/// `C* = (C_t + C_G) / (1 + W_G)`; SDF misses should carry black in `C_t`.
pub fn compose<T: Real>(sdf_color: &ColorImage<f32>, g: &GaussianRender<T>) -> ColorImage<T> {
    assert!(sdf_color.same_shape(&g.color), "compose size mismatch");
    let w_t = T::lit(super::SDF_WEIGHT);
    let data: Vec<Vector3<T>> = sdf_color
        .as_slice()
        .iter()
        .zip(g.color.as_slice())
        .zip(g.weight.as_slice())
        .map(|((ct, cg), wg)| (ct.map(|v| T::lit(v as f64)) * w_t + cg) / (w_t + *wg))
        .collect();
    Image::from_vec(sdf_color.width(), sdf_color.height(), data).expect("same size")
}

/// Pixels that take part in the loss: SDF hit or any Gaussian coverage.
pub fn loss_mask<T: Real>(sdf_hit: &Mask, weight: &Image<T>) -> Mask {
    assert!(sdf_hit.same_shape(weight));
    let data = sdf_hit
        .as_slice()
        .iter()
        .zip(weight.as_slice())
        .map(|(&h, &w)| h || w > T::zero())
        .collect();
    Image::from_vec(sdf_hit.width(), sdf_hit.height(), data).expect("same size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loss<T: Real> {
    pub value: T,
    /// dL/dC* per pixel.
    pub grad: ColorImage<T>,
    /// Number of contributing pixel-channels.
    pub count: usize,
}

/// Mean absolute error over the masked pixels and all three channels.
pub fn loss_l1<T: Real>(composite: &ColorImage<T>, target: &ColorImage<f32>, mask: &Mask) -> Loss<T> {
    assert!(composite.same_shape(target) && composite.same_shape(mask), "loss size mismatch");
    let n = mask.count();
    let (w, h) = (composite.width(), composite.height());
    let mut grad = Image::filled(w, h, Vector3::zeros());
    if n == 0 {
        return Loss {
            value: T::zero(),
            grad,
            count: 0,
        };
    }
    let count = 3 * n;
    let inv = T::one() / T::from_usize_lossy(count);
    let mut sum = 0.0f64;
    for i in 0..composite.len() {
        if !mask.as_slice()[i] {
            continue;
        }
        let c = composite.as_slice()[i];
        let t = target.as_slice()[i];
        let mut g = Vector3::zeros();
        for ch in 0..3 {
            let d = c[ch] - T::lit(t[ch] as f64);
            sum += d.as_f64().abs();
            g[ch] = if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
        grad.as_mut_slice()[i] = g;
    }
    Loss {
        value: T::lit(sum / count as f64),
        grad,
        count,
    }
}
