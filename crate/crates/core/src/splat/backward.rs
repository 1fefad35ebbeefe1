use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{project_full, Projection};
use super::render::{passes_depth_test, GaussianRender};
use super::{sh, GaussianSet, RenderConfig, LOG_SCALE, OPACITY, POSITION, ROTATION, SH};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage};
use crate::scalar::Real;

/// Pixels per backward work item.
pub const GROUP_PIXELS: usize = 256;

/// Per-parameter gradients in the same flat layout as [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Real> {
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(set: &GaussianSet<T>) -> Self {
        Self {
            stride: set.stride(),
            data: vec![T::zero(); set.params().len()],
        }
    }

    pub fn of(&self, i: usize) -> &[T] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    /// `self += other * s`.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b * s;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

/// Screen-space partial derivatives summed over one group of pixels.
#[derive(Clone, Copy)]
struct Partial<T: Real> {
    /// Σ dL/dα · α (the opacity and conic terms scale with α).
    alpha: T,
    center: Vector2<T>,
    /// dL/d(a, b, c) for the conic `[[a, b], [b, c]]` with q = a·dx² + 2b·dx·dy + c·dy².
    conic: [T; 3],
    color: Vector3<T>,
}

impl<T: Real> Partial<T> {
    fn zero() -> Self {
        Self {
            alpha: T::zero(),
            center: Vector2::zeros(),
            conic: [T::zero(); 3],
            color: Vector3::zeros(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.alpha += o.alpha;
        self.center += o.center;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.color += o.color;
    }
}

/// Analytic gradient of the loss with respect to every raw parameter.
///
/// `render` must be the forward result for the same inputs and `upstream`
/// holds dL/dC*. Work is split into groups of up to 256 footprint pixels of a
/// single Gaussian; each group writes only its own partial, and partials are
/// reduced per Gaussian in a fixed order.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    set: &GaussianSet<T>,
    pose: &Pose<T>,
    intr: &Intrinsics<T>,
    sdf_depth: &DepthImage,
    sdf_color: &ColorImage<f32>,
    render: &GaussianRender<T>,
    upstream: &ColorImage<T>,
    cfg: &RenderConfig,
) -> Gradients<T> {
    let (w, h) = (intr.width, intr.height);
    assert!(render.weight.width() == w && render.weight.height() == h);
    assert!(upstream.same_shape(&render.color) && sdf_color.same_shape(&render.color));

    // Per pixel: g/(1+W) and C*.
    let w_t = T::lit(super::SDF_WEIGHT);
    let pixel: Vec<(Vector3<T>, Vector3<T>)> = (0..w * h)
        .map(|i| {
            let inv = T::one() / (w_t + render.weight.as_slice()[i]);
            let ct = sdf_color.as_slice()[i].map(|v| T::lit(v as f64));
            let cstar = (ct * w_t + render.color.as_slice()[i]) * inv;
            (upstream.as_slice()[i] * inv, cstar)
        })
        .collect();

    let projections: Vec<Option<Projection<T>>> = (0..set.len())
        .into_par_iter()
        .map(|i| project_full(set.raw(i), pose, intr, cfg))
        .collect();

    let mut items: Vec<(u32, u32, u32)> = Vec::new();
    for (i, p) in projections.iter().enumerate() {
        if let Some(p) = p {
            let n = p.splat.pixel_count();
            let mut s = 0;
            while s < n {
                let e = (s + GROUP_PIXELS).min(n);
                items.push((i as u32, s as u32, e as u32));
                s = e;
            }
        }
    }

    let cutoff = cfg.alpha_cutoff;
    let partials: Vec<Partial<T>> = items
        .par_iter()
        .map(|&(i, s, e)| {
            let p = projections[i as usize].as_ref().expect("projected");
            let sp = &p.splat;
            let [x0, y0, x1, _] = sp.bounds;
            let bw = x1 - x0 + 1;
            let depth = sp.depth.as_f64();
            let a = sp.conic;
            let mut acc = Partial::zero();
            for k in s as usize..e as usize {
                let (x, y) = (x0 + k % bw, y0 + k / bw);
                if !passes_depth_test(depth, sdf_depth.at(x, y), cfg.epsilon) {
                    continue;
                }
                let dx = T::from_usize_lossy(x) - sp.center.x;
                let dy = T::from_usize_lossy(y) - sp.center.y;
                let q = a[(0, 0)] * dx * dx + T::lit(2.0) * a[(0, 1)] * dx * dy + a[(1, 1)] * dy * dy;
                let alpha = sp.opacity * (T::lit(-0.5) * q).exp();
                if alpha.as_f64() < cutoff {
                    continue;
                }
                let (gi, cstar) = pixel[y * w + x];
                let g_alpha = gi.dot(&(sp.color - cstar));
                let ga = g_alpha * alpha;
                acc.alpha += ga;
                // dα/dp̂ = α·A·d
                acc.center += Vector2::new(
                    a[(0, 0)] * dx + a[(0, 1)] * dy,
                    a[(0, 1)] * dx + a[(1, 1)] * dy,
                ) * ga;
                let half = T::lit(-0.5) * ga;
                acc.conic[0] += half * dx * dx;
                acc.conic[1] += half * T::lit(2.0) * dx * dy;
                acc.conic[2] += half * dy * dy;
                acc.color += gi * alpha;
            }
            acc
        })
        .collect();

    let mut per_gaussian: Vec<Option<Partial<T>>> = vec![None; set.len()];
    for (item, part) in items.iter().zip(&partials) {
        per_gaussian[item.0 as usize]
            .get_or_insert_with(Partial::zero)
            .add(part);
    }

    let stride = set.stride();
    let mut grads = Gradients::zeros_like(set);
    grads
        .data
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, out)| {
            if let (Some(part), Some(proj)) = (&per_gaussian[i], &projections[i]) {
                chain(part, proj, set.raw(i), intr, out);
            }
        });
    grads
}

/// Pushes the screen-space partials back to the raw parameters.
fn chain<T: Real>(
    part: &Partial<T>,
    p: &Projection<T>,
    raw: &[T],
    intr: &Intrinsics<T>,
    out: &mut [T],
) {
    let two = T::lit(2.0);
    // Opacity: α = σ(raw)·e  ⇒  dα/draw = α(1 − σ).
    out[OPACITY] = part.alpha * (T::one() - p.sigma);

    // Conic → 2D covariance.
    let g_conic = Matrix2::new(
        part.conic[0],
        part.conic[1] * T::lit(0.5),
        part.conic[1] * T::lit(0.5),
        part.conic[2],
    );
    let a = p.splat.conic;
    let g_cov2 = -(a * g_conic * a);

    // Σ2 = J C Jᵀ + low pass.
    let g_cov_cam: Matrix3<T> = p.jac.transpose() * g_cov2 * p.jac;
    let g_jac: Matrix2x3<T> = g_cov2 * p.jac * p.cov_cam * two;

    // Camera-space center: through J and through the projected center.
    let t = p.t;
    let inv_z = T::one() / t.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut g_t = p.jac.transpose() * part.center;
    g_t.x += g_jac[(0, 2)] * (-intr.fx * inv_z2);
    g_t.y += g_jac[(1, 2)] * (-intr.fy * inv_z2);
    g_t.z += g_jac[(0, 0)] * (-intr.fx * inv_z2)
        + g_jac[(0, 2)] * (two * intr.fx * t.x * inv_z3)
        + g_jac[(1, 1)] * (-intr.fy * inv_z2)
        + g_jac[(1, 2)] * (two * intr.fy * t.y * inv_z3);

    // C = W Σ Wᵀ.
    let g_cov: Matrix3<T> = p.w.transpose() * g_cov_cam * p.w;
    // Σ = M Mᵀ, M = R S.
    let s = Matrix3::from_diagonal(&p.scale);
    let m = p.rot * s;
    let g_m = g_cov * m * two;
    let g_rot = g_m * s;
    let rt_gm = p.rot.transpose() * g_m;
    for k in 0..3 {
        out[LOG_SCALE + k] = rt_gm[(k, k)] * p.scale[k];
    }

    // Rotation matrix → unit quaternion → stored quaternion.
    let [qw, qx, qy, qz] = p.q;
    let g = &g_rot;
    let gq = [
        two * (-qz * g[(0, 1)] + qy * g[(0, 2)] + qz * g[(1, 0)] - qx * g[(1, 2)] - qy * g[(2, 0)]
            + qx * g[(2, 1)]),
        two * (qy * g[(0, 1)] + qz * g[(0, 2)] + qy * g[(1, 0)] - two * qx * g[(1, 1)] - qw * g[(1, 2)]
            + qz * g[(2, 0)]
            + qw * g[(2, 1)]
            - two * qx * g[(2, 2)]),
        two * (-two * qy * g[(0, 0)] + qx * g[(0, 1)] + qw * g[(0, 2)] + qx * g[(1, 0)] + qz * g[(1, 2)]
            - qw * g[(2, 0)]
            + qz * g[(2, 1)]
            - two * qy * g[(2, 2)]),
        two * (-two * qz * g[(0, 0)] - qw * g[(0, 1)] + qx * g[(0, 2)] + qw * g[(1, 0)]
            - two * qz * g[(1, 1)]
            + qy * g[(1, 2)]
            + qx * g[(2, 0)]
            + qy * g[(2, 1)]),
    ];
    let dot = gq[0] * qw + gq[1] * qx + gq[2] * qy + gq[3] * qz;
    for k in 0..4 {
        out[ROTATION + k] = (gq[k] - p.q[k] * dot) / p.q_norm;
    }

    // Color: SH coefficients and the view direction.
    let k_sh = p.sh_count;
    let mut g_dir = Vector3::zeros();
    let mut grad_basis = [Vector3::zeros(); 16];
    sh::basis_gradient(&p.dir, k_sh, &mut grad_basis);
    for c in 0..3 {
        if p.clamped[c] {
            continue;
        }
        let gc = part.color[c];
        for k in 0..k_sh {
            out[SH + 3 * k + c] = gc * p.sh_basis[k];
            g_dir += grad_basis[k] * (gc * raw[SH + 3 * k + c]);
        }
    }
    let g_pos_dir = (g_dir - p.dir * p.dir.dot(&g_dir)) / p.dist;

    let g_p = p.w.transpose() * g_t + g_pos_dir;
    for k in 0..3 {
        out[POSITION + k] = g_p[k];
    }
}
