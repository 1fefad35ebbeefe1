use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{sh, RenderConfig, LOG_SCALE, OPACITY, POSITION, ROTATION, SH};
use crate::geometry::{Intrinsics, Pose};
use crate::scalar::{sigmoid, Real};

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D<T: Real> {
    /// Projected center in pixels.
    pub center: Vector2<T>,
    /// Low-pass regularized 2D covariance (pixel²).
    pub cov: Matrix2<T>,
    /// Inverse of `cov`.
    pub conic: Matrix2<T>,
    /// Camera-space depth of the center.
    pub depth: T,
    /// Three-sigma radius along the major axis (pixels).
    pub radius: T,
    pub color: Vector3<T>,
    pub opacity: T,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` of the region where α can
    /// reach the cutoff.
    pub bounds: [usize; 4],
}

impl<T: Real> Splat2D<T> {
    /// Unclamped α at pixel `(x, y)`.
    #[inline]
    pub fn alpha_at(&self, x: T, y: T) -> T {
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        let q = self.conic[(0, 0)] * dx * dx
            + T::lit(2.0) * self.conic[(0, 1)] * dx * dy
            + self.conic[(1, 1)] * dy * dy;
        self.opacity * (T::lit(-0.5) * q).exp()
    }

    pub fn pixel_count(&self) -> usize {
        let [x0, y0, x1, y1] = self.bounds;
        (x1 - x0 + 1) * (y1 - y0 + 1)
    }
}

/// Everything the backward pass needs to chain through the projection.
pub(crate) struct Projection<T: Real> {
    pub splat: Splat2D<T>,
    /// Camera-space center.
    pub t: Vector3<T>,
    pub jac: Matrix2x3<T>,
    /// World-to-camera rotation.
    pub w: Matrix3<T>,
    /// Camera-space 3D covariance.
    pub cov_cam: Matrix3<T>,
    /// Unit quaternion (w, x, y, z) and the norm of the stored one.
    pub q: [T; 4],
    pub q_norm: T,
    pub rot: Matrix3<T>,
    pub scale: Vector3<T>,
    /// View direction from the camera center to the Gaussian.
    pub dir: Vector3<T>,
    pub dist: T,
    /// Per-channel flag: color was clamped at zero.
    pub clamped: [bool; 3],
    pub sh_basis: [T; 16],
    pub sh_count: usize,
    pub sigma: T,
}

pub(crate) fn quat_to_matrix<T: Real>(q: &[T; 4]) -> Matrix3<T> {
    let [w, x, y, z] = *q;
    let two = T::lit(2.0);
    let one = T::one();
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Low-pass variance added to the projected covariance (pixel²).
pub const LOW_PASS: f64 = 0.3;

/// Projects one Gaussian (raw parameter slice); `None` if culled.
pub fn project<T: Real>(
    raw: &[T],
    cam_to_world: &Pose<T>,
    intr: &Intrinsics<T>,
    cfg: &RenderConfig,
) -> Option<Splat2D<T>> {
    project_full(raw, cam_to_world, intr, cfg).map(|p| p.splat)
}

pub(crate) fn project_full<T: Real>(
    raw: &[T],
    cam_to_world: &Pose<T>,
    intr: &Intrinsics<T>,
    cfg: &RenderConfig,
) -> Option<Projection<T>> {
    let l = T::lit;
    let p = Vector3::new(raw[POSITION], raw[POSITION + 1], raw[POSITION + 2]);
    let w = cam_to_world.rotation.transpose();
    let t = w * (p - cam_to_world.translation);
    if t.z <= l(cfg.near) {
        return None;
    }
    let sigma = sigmoid(raw[OPACITY]);
    let cutoff = l(cfg.alpha_cutoff);
    if sigma < cutoff {
        return None;
    }

    let qs = [raw[ROTATION], raw[ROTATION + 1], raw[ROTATION + 2], raw[ROTATION + 3]];
    let q_norm = (qs[0] * qs[0] + qs[1] * qs[1] + qs[2] * qs[2] + qs[3] * qs[3]).sqrt();
    if !(q_norm > T::zero()) {
        return None;
    }
    let q = qs.map(|v| v / q_norm);
    let rot = quat_to_matrix(&q);
    let scale = Vector3::new(raw[LOG_SCALE].exp(), raw[LOG_SCALE + 1].exp(), raw[LOG_SCALE + 2].exp());
    let m = rot * Matrix3::from_diagonal(&scale);
    let cov_world = m * m.transpose();
    let cov_cam = w * cov_world * w.transpose();

    let inv_z = T::one() / t.z;
    let jac = Matrix2x3::new(
        intr.fx * inv_z,
        T::zero(),
        -intr.fx * t.x * inv_z * inv_z,
        T::zero(),
        intr.fy * inv_z,
        -intr.fy * t.y * inv_z * inv_z,
    );
    let mut cov = jac * cov_cam * jac.transpose();
    cov[(0, 0)] += l(LOW_PASS);
    cov[(1, 1)] += l(LOW_PASS);
    // Symmetrize against rounding.
    let off = (cov[(0, 1)] + cov[(1, 0)]) * l(0.5);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    let det = cov[(0, 0)] * cov[(1, 1)] - off * off;
    if !(det > T::zero()) {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)] / det, -off / det, -off / det, cov[(0, 0)] / det);
    let center = Vector2::new(intr.fx * t.x * inv_z + intr.cx, intr.fy * t.y * inv_z + intr.cy);

    // α ≥ cutoff  ⇔  dᵀ Σ⁻¹ d ≤ 2 ln(σ / cutoff); the ellipse's bounding box
    // has half extents sqrt(q·Σ_xx), sqrt(q·Σ_yy).
    let q_max = l(2.0) * (sigma / cutoff).ln();
    let ex = (q_max * cov[(0, 0)]).sqrt();
    let ey = (q_max * cov[(1, 1)]).sqrt();
    let (wf, hf) = (T::from_usize_lossy(intr.width), T::from_usize_lossy(intr.height));
    let x0 = (center.x - ex).ceil().max(T::zero());
    let y0 = (center.y - ey).ceil().max(T::zero());
    let x1 = (center.x + ex).floor().min(wf - T::one());
    let y1 = (center.y + ey).floor().min(hf - T::one());
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let bounds = [
        x0.as_f64() as usize,
        y0.as_f64() as usize,
        x1.as_f64() as usize,
        y1.as_f64() as usize,
    ];

    let half_tr = (cov[(0, 0)] + cov[(1, 1)]) * l(0.5);
    let lambda_max = half_tr + (half_tr * half_tr - det).max(T::zero()).sqrt();
    let radius = l(3.0) * lambda_max.sqrt();

    let offset = p - cam_to_world.translation;
    let dist = offset.norm();
    let dir = offset / dist;
    let sh_count = (raw.len() - SH) / 3;
    let mut sh_basis = [T::zero(); 16];
    sh::basis(&dir, sh_count, &mut sh_basis);
    let mut color = Vector3::repeat(l(sh::COLOR_OFFSET));
    for (k, b) in sh_basis.iter().enumerate().take(sh_count) {
        for c in 0..3 {
            color[c] += *b * raw[SH + 3 * k + c];
        }
    }
    let mut clamped = [false; 3];
    for c in 0..3 {
        if color[c] < T::zero() {
            color[c] = T::zero();
            clamped[c] = true;
        }
    }

    Some(Projection {
        splat: Splat2D {
            center,
            cov,
            conic,
            depth: t.z,
            radius,
            color,
            opacity: sigma,
            bounds,
        },
        t,
        jac,
        w,
        cov_cam,
        q,
        q_norm,
        rot,
        scale,
        dir,
        dist,
        clamped,
        sh_basis,
        sh_count,
        sigma,
    })
}
