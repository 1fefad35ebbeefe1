//! Sort-free Gaussian radiance layer on top of the SDF render.
//!
//! Each Gaussian contributes `α·c` and `α` to per-pixel sums unless its center
//! lies behind the SDF surface; the result is blended with the SDF color as
//! `C* = (C_t + C_G) / (1 + W_G)`. No depth sorting is involved, so the
//! forward pass is a pure sum and the backward pass decomposes per Gaussian.
//!
//! Parameters are kept in one flat buffer per set, `stride` values per
//! Gaussian, in the order
//! `position[3] | log_scale[3] | rotation (w, x, y, z)[4] | raw_opacity | sh[3·K]`
//! where `K = (degree + 1)²` and SH coefficients are RGB triples.

mod adam;
mod backward;
pub mod file;
mod project;
mod render;
pub mod sh;

pub use adam::{Adam, LearningRates};
pub use backward::{backward, Gradients};
pub use project::{project, Splat2D};
pub use render::{compose, forward, loss_l1, loss_mask, GaussianRender, Loss, TILE};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::scalar::{sigmoid, Real};

pub const POSITION: usize = 0;
pub const LOG_SCALE: usize = 3;
pub const ROTATION: usize = 6;
pub const OPACITY: usize = 10;
pub const SH: usize = 11;

/// Weight of the SDF color in the composite (fixed).
pub const SDF_WEIGHT: f64 = 1.0;

pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn stride_for(degree: usize) -> usize {
    SH + 3 * sh_coeffs(degree)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    /// Depth-test slack ε in meters.
    pub epsilon: f64,
    pub sh_degree: usize,
    /// Contributions with α below this are dropped.
    pub alpha_cutoff: f64,
    /// Centers closer than this (camera z) are culled.
    pub near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            sh_degree: 1,
            alpha_cutoff: 1.0 / 255.0,
            near: 0.01,
        }
    }
}

/// Owned, unpacked view of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T: Real> {
    pub position: Vector3<T>,
    pub log_scale: Vector3<T>,
    /// Stored (possibly unnormalized) quaternion.
    pub rotation: Quaternion<T>,
    pub raw_opacity: T,
    pub sh: Vec<Vector3<T>>,
}

impl<T: Real> Gaussian<T> {
    pub fn opacity(&self) -> T {
        sigmoid(self.raw_opacity)
    }

    pub fn scale(&self) -> Vector3<T> {
        self.log_scale.map(|v| v.exp())
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_quaternion(self.rotation)
    }
}

/// Flat-buffer Gaussian collection.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T: Real> {
    sh_degree: usize,
    stride: usize,
    data: Vec<T>,
}

impl<T: Real> GaussianSet<T> {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= MAX_SH_DEGREE, "SH degree above {MAX_SH_DEGREE}");
        Self {
            sh_degree,
            stride: stride_for(sh_degree),
            data: Vec::new(),
        }
    }

    /// Wraps an existing parameter buffer; `None` if its length is not a
    /// multiple of the stride.
    pub fn from_params(sh_degree: usize, data: Vec<T>) -> Option<Self> {
        let mut s = Self::new(sh_degree);
        if data.len() % s.stride != 0 {
            return None;
        }
        s.data = data;
        Some(s)
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn params(&self) -> &[T] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn raw(&self, i: usize) -> &[T] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn raw_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.stride;
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn push(&mut self, g: &Gaussian<T>) {
        let k = sh_coeffs(self.sh_degree);
        self.data.extend_from_slice(g.position.as_slice());
        self.data.extend_from_slice(g.log_scale.as_slice());
        let q = g.rotation;
        self.data.extend_from_slice(&[q.w, q.i, q.j, q.k]);
        self.data.push(g.raw_opacity);
        for j in 0..k {
            let c = g.sh.get(j).copied().unwrap_or_else(Vector3::zeros);
            self.data.extend_from_slice(c.as_slice());
        }
    }

    pub fn get(&self, i: usize) -> Gaussian<T> {
        let r = self.raw(i);
        let k = sh_coeffs(self.sh_degree);
        Gaussian {
            position: Vector3::new(r[0], r[1], r[2]),
            log_scale: Vector3::new(r[3], r[4], r[5]),
            rotation: Quaternion::new(r[6], r[7], r[8], r[9]),
            raw_opacity: r[OPACITY],
            sh: (0..k)
                .map(|j| Vector3::new(r[SH + 3 * j], r[SH + 3 * j + 1], r[SH + 3 * j + 2]))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian<T>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn position(&self, i: usize) -> Vector3<T> {
        let r = self.raw(i);
        Vector3::new(r[0], r[1], r[2])
    }

    pub fn scale(&self, i: usize) -> Vector3<T> {
        let r = self.raw(i);
        Vector3::new(r[3].exp(), r[4].exp(), r[5].exp())
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.raw(i)[OPACITY])
    }

    /// Keeps the Gaussians whose flag is true, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let s = self.stride;
        let mut w = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                if w != i {
                    self.data.copy_within(i * s..(i + 1) * s, w * s);
                }
                w += 1;
            }
        }
        self.data.truncate(w * s);
    }

    /// Normalizes every stored quaternion.
    pub fn normalize_rotations(&mut self) {
        let s = self.stride;
        for g in self.data.chunks_mut(s) {
            let q = &mut g[ROTATION..ROTATION + 4];
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > T::zero() {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                q.copy_from_slice(&[T::one(), T::zero(), T::zero(), T::zero()]);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        GaussianSet {
            sh_degree: self.sh_degree,
            stride: self.stride,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
