//! Rigid transforms, pinhole cameras, frames and depth-derived geometry maps.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::image::{ColorImage, DepthImage, Image, Mask, PointImage};
use crate::scalar::Real;

/// Closest depth treated as a valid measurement (meters).
pub const MIN_DEPTH: f32 = 0.1;
/// Farthest depth treated as a valid measurement (meters).
pub const MAX_DEPTH: f32 = 10.0;

#[inline]
pub fn is_valid_depth(d: f32) -> bool {
    (MIN_DEPTH..=MAX_DEPTH).contains(&d)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("image {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("depth map contains negative or non-finite values")]
    InvalidDepth,
    #[error("{width}x{height} is not divisible by 2^{} for a {levels}-level pyramid", levels - 1)]
    PyramidIndivisible {
        width: usize,
        height: usize,
        levels: usize,
    },
}

/// Pinhole camera model. Pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    /// Divisor converting raw depth units to meters.
    pub depth_scale: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: usize,
        height: usize,
        depth_scale: T,
    ) -> Result<Self, GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(fx > T::zero() && fy > T::zero()) {
            return bad("focal lengths must be positive");
        }
        if width == 0 || height == 0 {
            return bad("image size must be non-zero");
        }
        if !(cx >= T::zero() && cx < T::from_usize_lossy(width)) {
            return bad("cx outside the image");
        }
        if !(cy >= T::zero() && cy < T::from_usize_lossy(height)) {
            return bad("cy outside the image");
        }
        if !(depth_scale > T::zero()) {
            return bad("depth scale must be positive");
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        })
    }

    /// Projects a camera-space point to pixel coordinates; `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<T>) -> Option<Vector2<T>> {
        if p.z <= T::zero() {
            return None;
        }
        let inv_z = T::one() / p.z;
        Some(Vector2::new(
            self.fx * p.x * inv_z + self.cx,
            self.fy * p.y * inv_z + self.cy,
        ))
    }

    /// Camera-space point at pixel `(u, v)` with depth (z) `depth`.
    #[inline]
    pub fn unproject(&self, u: T, v: T, depth: T) -> Vector3<T> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Intrinsics of a 2x2 box-downsampled image.
    pub fn downsampled(&self) -> Self {
        let half = T::lit(0.5);
        Self {
            fx: self.fx * half,
            fy: self.fy * half,
            cx: (self.cx + half) * half - half,
            cy: (self.cy + half) * half - half,
            width: self.width / 2,
            height: self.height / 2,
            depth_scale: self.depth_scale,
        }
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
            depth_scale: U::lit(self.depth_scale.as_f64()),
        }
    }
}

/// Rigid transform, camera-to-world by convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation to 1e-6.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, GeometryError> {
        let pose = Self {
            rotation,
            translation,
        };
        let deviation = pose.orthonormality_error();
        if deviation > 1e-6 {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        Ok(pose)
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Max of `|RᵀR - I|` entries and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        let off = gram.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        off.max((r.determinant().as_f64() - 1.0).abs())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// Maps a world point into this pose's local (camera) frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.tr_mul(&(p - self.translation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, rhs: &Self) -> Self {
        Self {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> T {
        let c = (self.rotation.trace() - T::one()) * T::lit(0.5);
        c.clamp(-T::one(), T::one()).acos()
    }

    /// Projects the rotation back onto SO(3); use after long composition chains.
    pub fn renormalized(&self) -> Self {
        Self::from_quaternion(&self.quaternion(), self.translation)
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }

    /// Camera-to-world pose at `eye` looking at `target`; image y points along -`up`.
    pub fn look_at(eye: &Vector3<T>, target: &Vector3<T>, up: &Vector3<T>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < T::lit(1e-9) {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: *eye,
        }
    }
}

impl<T: Real> Mul for Pose<T> {
    type Output = Pose<T>;

    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

impl<T: Real> Mul for &Pose<T> {
    type Output = Pose<T>;

    fn mul(self, rhs: Self) -> Pose<T> {
        self.compose(rhs)
    }
}

/// se(3) coordinates: rotation part first, then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist<T: Real>(pub Vector6<T>);

#[inline]
pub fn skew<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -w.z,
        w.y,
        w.z,
        T::zero(),
        -w.x,
        -w.y,
        w.x,
        T::zero(),
    )
}

impl<T: Real> Twist<T> {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(rotation: Vector3<T>, translation: Vector3<T>) -> Self {
        Self(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn rotation(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> T {
        self.0.norm()
    }

    /// Exponential map onto SE(3).
    pub fn exp(&self) -> Pose<T> {
        let w = self.rotation();
        let v = self.translation();
        let theta = w.norm();
        let wx = skew(&w);
        let wx2 = wx * wx;
        let id = Matrix3::identity();
        if theta < T::lit(1e-8) {
            let half = T::lit(0.5);
            return Pose {
                rotation: id + wx + wx2 * half,
                translation: (id + wx * half) * v,
            };
        }
        let theta2 = theta * theta;
        let s = theta.sin();
        let a = s / theta;
        // 1 - cos = 2 sin²(θ/2) avoids cancellation.
        let half_s = (theta * T::lit(0.5)).sin();
        let b = T::lit(2.0) * half_s * half_s / theta2;
        let cc = if theta < T::lit(1e-3) {
            T::lit(1.0 / 6.0) - theta2 / T::lit(120.0)
        } else {
            (theta - s) / (theta2 * theta)
        };
        Pose {
            rotation: id + wx * a + wx2 * b,
            translation: (id + wx * b + wx2 * cc) * v,
        }
    }
}

/// One RGB-D observation.
#[derive(Clone, Debug)]
pub struct Frame {
    pub rgb: ColorImage<f32>,
    /// Meters; 0 marks invalid pixels.
    pub depth: DepthImage,
    pub intrinsics: Intrinsics<f64>,
    pub index: usize,
    pub timestamp: f64,
}

impl Frame {
    /// Validates dimensions and zeroes depth readings outside the sensor range.
    pub fn new(
        rgb: ColorImage<f32>,
        mut depth: DepthImage,
        intrinsics: Intrinsics<f64>,
        index: usize,
        timestamp: f64,
    ) -> Result<Self, GeometryError> {
        for (what, w, h) in [
            ("rgb", rgb.width(), rgb.height()),
            ("depth", depth.width(), depth.height()),
        ] {
            if w != intrinsics.width || h != intrinsics.height {
                return Err(GeometryError::DimensionMismatch {
                    what,
                    got_w: w,
                    got_h: h,
                    want_w: intrinsics.width,
                    want_h: intrinsics.height,
                });
            }
        }
        for d in depth.as_mut_slice() {
            if !d.is_finite() || *d < 0.0 {
                return Err(GeometryError::InvalidDepth);
            }
            if !is_valid_depth(*d) {
                *d = 0.0;
            }
        }
        Ok(Self {
            rgb,
            depth,
            intrinsics,
            index,
            timestamp,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Per-pixel vertices and normals. Invalid entries hold zeros, never NaN.
#[derive(Clone, Debug)]
pub struct GeometryMaps {
    pub vertices: PointImage,
    pub normals: PointImage,
    /// Vertex validity.
    pub valid: Mask,
    /// Normal validity; always a subset of `valid`.
    pub normal_valid: Mask,
}

impl GeometryMaps {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            vertices: Image::filled(width, height, Vector3::zeros()),
            normals: Image::filled(width, height, Vector3::zeros()),
            valid: Image::filled(width, height, false),
            normal_valid: Image::filled(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.vertices.width()
    }

    pub fn height(&self) -> usize {
        self.vertices.height()
    }
}

/// Camera-space vertex map from a depth image.
pub fn back_project(frame: &Frame) -> GeometryMaps {
    let (w, h) = (frame.width(), frame.height());
    let k = frame.intrinsics.cast::<f32>();
    let mut maps = GeometryMaps::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = frame.depth.at(x, y);
            if d > 0.0 {
                maps.vertices.set(x, y, k.unproject(x as f32, y as f32, d));
                maps.valid.set(x, y, true);
            }
        }
    }
    maps
}

/// Normals from central differences, oriented toward the camera at the origin.
///
/// Assumes camera-space vertices. A pixel gets a normal only if it and its
/// four direct neighbors are valid, so the image border is always invalid.
pub fn compute_normals(maps: &GeometryMaps) -> GeometryMaps {
    let (w, h) = (maps.width(), maps.height());
    let mut out = maps.clone();
    let rows: Vec<(Vec<Vector3<f32>>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut normals = vec![Vector3::zeros(); w];
            let mut valid = vec![false; w];
            if y == 0 || y + 1 >= h {
                return (normals, valid);
            }
            for x in 1..w.saturating_sub(1) {
                let ok = maps.valid.at(x, y)
                    && maps.valid.at(x - 1, y)
                    && maps.valid.at(x + 1, y)
                    && maps.valid.at(x, y - 1)
                    && maps.valid.at(x, y + 1);
                if !ok {
                    continue;
                }
                let dx = maps.vertices.at(x + 1, y) - maps.vertices.at(x - 1, y);
                let dy = maps.vertices.at(x, y + 1) - maps.vertices.at(x, y - 1);
                let n = dy.cross(&dx);
                let len = n.norm();
                if !(len > 0.0) || !len.is_finite() {
                    continue;
                }
                let mut n = n / len;
                if n.dot(&maps.vertices.at(x, y)) > 0.0 {
                    n = -n;
                }
                normals[x] = n;
                valid[x] = true;
            }
            (normals, valid)
        })
        .collect();
    for (y, (normals, valid)) in rows.into_iter().enumerate() {
        for x in 0..w {
            out.normals.set(x, y, normals[x]);
            out.normal_valid.set(x, y, valid[x]);
        }
    }
    out
}

/// Applies a rigid transform: vertices are moved, normals only rotated.
pub fn transform_maps(maps: &GeometryMaps, pose: &Pose<f64>) -> GeometryMaps {
    let p = pose.cast::<f32>();
    let mut out = maps.clone();
    for (i, v) in out.vertices.as_mut_slice().iter_mut().enumerate() {
        if maps.valid.as_slice()[i] {
            *v = p.transform_point(v);
        }
    }
    for (i, n) in out.normals.as_mut_slice().iter_mut().enumerate() {
        if maps.normal_valid.as_slice()[i] {
            *n = p.rotate(n);
        }
    }
    out
}

/// Coarse-to-fine resolution hierarchy; level 0 is the input frame.
#[derive(Clone, Debug)]
pub struct FramePyramid {
    pub levels: Vec<Frame>,
}

impl FramePyramid {
    pub fn finest(&self) -> &Frame {
        &self.levels[0]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn build_pyramid(frame: &Frame, levels: usize) -> Result<FramePyramid, GeometryError> {
    let levels = levels.max(1);
    let div = 1usize << (levels - 1);
    if frame.width() % div != 0 || frame.height() % div != 0 {
        return Err(GeometryError::PyramidIndivisible {
            width: frame.width(),
            height: frame.height(),
            levels,
        });
    }
    let mut out = vec![frame.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("pyramid has a level");
        out.push(downsample_frame(prev));
    }
    Ok(FramePyramid { levels: out })
}

/// 2x2 box filter; depth averages only the valid samples of each block.
fn downsample_frame(f: &Frame) -> Frame {
    let (w, h) = (f.width() / 2, f.height() / 2);
    let mut rgb = Image::filled(w, h, Vector3::zeros());
    let mut depth = Image::filled(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let mut c = Vector3::zeros();
            let (mut dsum, mut n) = (0.0f32, 0u32);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sx, sy) = (2 * x + dx, 2 * y + dy);
                c += f.rgb.at(sx, sy);
                let d = f.depth.at(sx, sy);
                if d > 0.0 {
                    dsum += d;
                    n += 1;
                }
            }
            rgb.set(x, y, c * 0.25);
            if n > 0 {
                depth.set(x, y, dsum / n as f32);
            }
        }
    }
    Frame {
        rgb,
        depth,
        intrinsics: f.intrinsics.downsampled(),
        index: f.index,
        timestamp: f.timestamp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn intr(w: usize, h: usize) -> Intrinsics<f64> {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, w, h, 1.0).unwrap()
    }

    fn flat_frame(w: usize, h: usize, z: f32) -> Frame {
        Frame::new(
            Image::filled(w, h, Vector3::repeat(0.5)),
            Image::filled(w, h, z),
            Intrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h, 1.0).unwrap(),
            0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4, 1.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4, 1.0).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4, 1.0).is_ok());
    }

    #[test]
    fn back_project_principal_point_and_offset_pixel() {
        let mut depth = Image::filled(101, 101, 0.0f32);
        depth.set(50, 50, 1.0);
        depth.set(60, 50, 2.0);
        let f = Frame::new(
            Image::filled(101, 101, Vector3::zeros()),
            depth,
            intr(101, 101),
            0,
            0.0,
        )
        .unwrap();
        let m = back_project(&f);
        assert_eq!(m.vertices.at(50, 50), Vector3::new(0.0, 0.0, 1.0));
        let v = m.vertices.at(60, 50);
        assert!((v - Vector3::new(0.2, 0.0, 2.0)).norm() < 1e-6);
        assert!(!m.valid.at(0, 0));
        assert_eq!(m.vertices.at(0, 0), Vector3::zeros());
    }

    #[test]
    fn out_of_range_depth_is_invalidated() {
        let mut depth = Image::filled(4, 4, 1.0f32);
        depth.set(0, 0, 0.05);
        depth.set(1, 0, 12.0);
        let f = Frame::new(
            Image::filled(4, 4, Vector3::zeros()),
            depth,
            Intrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4, 1.0).unwrap(),
            0,
            0.0,
        )
        .unwrap();
        assert_eq!(f.depth.at(0, 0), 0.0);
        assert_eq!(f.depth.at(1, 0), 0.0);
        assert_eq!(f.depth.at(2, 0), 1.0);
        let mut neg = Image::filled(4, 4, 1.0f32);
        neg.set(3, 3, -1.0);
        assert!(Frame::new(
            Image::filled(4, 4, Vector3::zeros()),
            neg,
            Intrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4, 1.0).unwrap(),
            0,
            0.0
        )
        .is_err());
    }

    #[test]
    fn planar_normals_face_camera_and_border_is_invalid() {
        let f = flat_frame(16, 12, 1.5);
        let m = compute_normals(&back_project(&f));
        for y in 0..12 {
            for x in 0..16 {
                let border = x == 0 || y == 0 || x == 15 || y == 11;
                assert_eq!(m.normal_valid.at(x, y), !border);
                if !border {
                    assert!((m.normals.at(x, y) - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn normals_on_analytic_sphere() {
        // Sphere of radius 0.5 centred 2 m in front of the camera.
        let (w, h) = (640usize, 480usize);
        let k = Intrinsics::new(525.0, 525.0, 319.5, 239.5, w, h, 1.0).unwrap();
        let c = Vector3::new(0.0, 0.0, 2.0f64);
        let r = 0.5f64;
        let depth = Image::from_fn(w, h, |x, y| {
            let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let a = d.dot(&d);
            let b = -2.0 * d.dot(&c);
            let cc = c.dot(&c) - r * r;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                0.0
            } else {
                ((-b - disc.sqrt()) / (2.0 * a)) as f32
            }
        });
        let f = Frame::new(Image::filled(w, h, Vector3::zeros()), depth, k, 0, 0.0).unwrap();
        let m = compute_normals(&back_project(&f));
        let (mut good, mut total) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                if !m.normal_valid.at(x, y) {
                    continue;
                }
                total += 1;
                let p = m.vertices.at(x, y).cast::<f64>();
                let analytic = (p - c).normalize();
                let n = m.normals.at(x, y).cast::<f64>();
                if n.dot(&analytic).clamp(-1.0, 1.0).acos() < 1f64.to_radians() {
                    good += 1;
                }
                assert!((n.norm() - 1.0).abs() < 1e-5);
            }
        }
        assert!(total > 1000);
        assert!(good as f64 >= 0.99 * total as f64, "{good}/{total}");
    }

    #[test]
    fn transform_maps_identity_translation_and_yaw() {
        let f = flat_frame(8, 8, 1.0);
        let m = compute_normals(&back_project(&f));
        let same = transform_maps(&m, &Pose::identity());
        assert_eq!(same.vertices, m.vertices);
        let t = Vector3::new(0.1, -0.2, 0.3);
        let moved = transform_maps(&m, &Pose::from_translation(t));
        for i in 0..m.vertices.len() {
            if m.valid.as_slice()[i] {
                let d = moved.vertices.as_slice()[i] - m.vertices.as_slice()[i];
                assert!((d - t.cast::<f32>()).norm() < 1e-6);
            }
        }
        assert_eq!(moved.normals, m.normals);

        let yaw = Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()).exp();
        let p = yaw.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn twist_exp_basics() {
        assert_eq!(Twist::<f64>::zero().exp(), Pose::identity());
        let rz = Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()).exp();
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((rz.rotation - expect).norm() < 1e-12);

        let xi = Twist(Vector6::new(0.3, -0.2, 0.5, 0.1, 0.7, -0.4));
        let neg = Twist(-xi.0);
        let id = xi.exp() * neg.exp();
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn pose_inverse_and_validation() {
        let p = Twist(Vector6::new(0.1, 0.2, -0.3, 1.0, 2.0, 3.0)).exp();
        let id = p.inverse() * p;
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-6);
        assert!(id.translation.norm() < 1e-6);
        assert!(Pose::new(p.rotation, p.translation).is_ok());
        assert!(Pose::new(p.rotation * 1.01, p.translation).is_err());
        assert!(Pose::new(-Matrix3::<f64>::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn pyramid_shapes_and_constant_depth() {
        let f = flat_frame(64, 48, 2.0);
        let p = build_pyramid(&f, 3).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(64, 48), (32, 24), (16, 12)]);
        for l in &p.levels {
            assert!(l.depth.as_slice().iter().all(|&d| d == 2.0));
        }
        assert_eq!(build_pyramid(&f, 1).unwrap().len(), 1);
        assert!(build_pyramid(&flat_frame(60, 46, 1.0), 3).is_err());
        let big = flat_frame(640, 480, 1.0);
        let dims: Vec<_> = build_pyramid(&big, 3)
            .unwrap()
            .levels
            .iter()
            .map(|l| (l.width(), l.height()))
            .collect();
        assert_eq!(dims, vec![(640, 480), (320, 240), (160, 120)]);
    }

    #[test]
    fn pyramid_intrinsics_keep_rays_consistent() {
        // A coarse pixel's ray must pass through the mean of its four fine pixel rays.
        let k = Intrinsics::new(120.0, 110.0, 31.5, 23.5, 64, 48, 1.0).unwrap();
        let kc = k.downsampled();
        let fine = (0..2)
            .flat_map(|dy| (0..2).map(move |dx| (10 + dx, 6 + dy)))
            .map(|(x, y)| k.unproject(x as f64, y as f64, 1.0))
            .fold(Vector3::zeros(), |a, b| a + b)
            / 4.0;
        let coarse = kc.unproject(5.0, 3.0, 1.0);
        assert!((fine - coarse).norm() < 1e-12);
    }
}
