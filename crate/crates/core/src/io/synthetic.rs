//! Analytic scenes rendered by exact ray-primitive intersection.
//!
//! These are the ground truth for the tests: depth, normals and the signed
//! distance field are all available in closed form.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{is_valid_depth, Frame, GeometryError, Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage, Image};
use crate::tsdf::SdfRender;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
    /// Half-space boundary `normal · x = offset`; the solid side is where
    /// `normal · x < offset`.
    Plane { normal: Vector3<f64>, offset: f64 },
}

impl Shape {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Cuboid { min, max } => {
                let c = (min + max) * 0.5;
                let half = (max - min) * 0.5;
                let q = (p - c).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Shape::Plane { normal, offset } => normal.dot(p) - offset,
        }
    }

    /// Nearest entry point along the ray with its outward normal.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let a = d.norm_squared();
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                Some((t, (o + d * t - center) / *radius))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 0.0;
                for i in 0..3 {
                    if d[i].abs() < 1e-300 {
                        if o[i] < min[i] || o[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let mut a = (min[i] - o[i]) / d[i];
                    let mut b = (max[i] - o[i]) / d[i];
                    let mut s = -1.0;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        s = 1.0;
                    }
                    if a > t0 {
                        t0 = a;
                        axis = i;
                        sign = s;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = sign;
                Some((t0, n))
            }
            Shape::Plane { normal, offset } => {
                let denom = normal.dot(d);
                if denom >= 0.0 {
                    // Only the free side (front face) is visible.
                    return None;
                }
                let t = (offset - normal.dot(o)) / denom;
                (t > 0.0).then_some((t, *normal))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Constant(Vector3<f64>),
    /// Solid 3D checkerboard with cell edge `size`. Faces lying on a cell
    /// boundary flicker between the two colors.
    Checker { a: Vector3<f64>, b: Vector3<f64>, size: f64 },
    /// Sum of a few random plane waves; band-limited to `max_frequency`
    /// cycles per meter.
    Noise { base: Vector3<f64>, amplitude: f64, max_frequency: f64, seed: u64 },
}

impl Texture {
    pub fn albedo(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Texture::Constant(c) => *c,
            Texture::Checker { a, b, size } => {
                let s = p.map(|v| (v / size).floor() as i64).sum();
                if s.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { base, amplitude, max_frequency, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out = *base;
                const WAVES: usize = 6;
                for _ in 0..WAVES {
                    let dir = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                    .try_normalize(1e-9)
                    .unwrap_or_else(Vector3::x);
                    let f = rng.random_range(0.3..1.0) * max_frequency;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let tint = Vector3::new(
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.5..1.0),
                    );
                    let s = (std::f64::consts::TAU * f * dir.dot(p) + phase).sin();
                    out += tint * (amplitude * s / WAVES as f64);
                }
                out.map(|v| v.clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Standard deviation of additive depth noise in meters.
    pub depth_sigma: f64,
    /// Probability that a valid depth pixel is dropped.
    pub dropout: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_sigma: 0.0,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub trajectory: Vec<Pose<f64>>,
    pub intrinsics: Intrinsics<f64>,
    pub noise: NoiseModel,
    /// Direction the light travels (world).
    pub light_dir: Vector3<f64>,
    pub ambient: f64,
}

/// Closest surface point along one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    /// Ray parameter; equals camera depth for rays with unit z component.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

/// Noise-free rendering of a scene from one pose.
#[derive(Clone, Debug)]
pub struct SyntheticView {
    pub rgb: ColorImage<f32>,
    pub depth: DepthImage,
    /// The same view in the form the tracker consumes as its model.
    pub model: SdfRender,
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub poses: Vec<Pose<f64>>,
    /// Noiseless color and depth per frame.
    pub reference_rgb: Vec<ColorImage<f32>>,
    pub reference_depth: Vec<DepthImage>,
}

impl SyntheticScene {
    /// Signed distance to the union of all primitives.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|pr| pr.shape.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (i, pr) in self.primitives.iter().enumerate() {
            if let Some((t, n)) = pr.shape.intersect(origin, dir) {
                let point = origin + dir * t;
                // A surface buried inside another primitive is not visible.
                let buried = self
                    .primitives
                    .iter()
                    .enumerate()
                    .any(|(j, q)| j != i && q.shape.sdf(&point) < -1e-9);
                if buried {
                    continue;
                }
                if best.is_none_or(|b| t < b.t) {
                    best = Some(SurfaceHit {
                        t,
                        point,
                        normal: n,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Lambertian color of a surface hit under the fixed directional light.
    pub fn shade(&self, hit: &SurfaceHit) -> Vector3<f64> {
        let albedo = self.primitives[hit.primitive].texture.albedo(&hit.point);
        let l = -self.light_dir.normalize();
        let diffuse = hit.normal.dot(&l).max(0.0);
        albedo * (self.ambient + (1.0 - self.ambient) * diffuse)
    }

    /// Exact rendering at `pose` with the given intrinsics.
    pub fn render_with(&self, pose: &Pose<f64>, k: &Intrinsics<f64>) -> SyntheticView {
        let (w, h) = (k.width, k.height);
        let rows: Vec<Vec<Option<(f32, Vector3<f32>, Vector3<f32>, Vector3<f32>)>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let dc = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                        let d = pose.rotate(&dc);
                        let hit = self.intersect(&pose.translation, &d)?;
                        let depth = hit.t as f32;
                        if !is_valid_depth(depth) {
                            return None;
                        }
                        let c = self.shade(&hit).map(|v| v.clamp(0.0, 1.0));
                        Some((depth, c.cast(), hit.point.cast(), hit.normal.cast()))
                    })
                    .collect()
            })
            .collect();
        let mut rgb = Image::filled(w, h, Vector3::zeros());
        let mut depth = Image::filled(w, h, 0.0f32);
        let mut model = SdfRender::empty(w, h);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, px) in row.into_iter().enumerate() {
                if let Some((d, c, p, n)) = px {
                    rgb.set(x, y, c);
                    depth.set(x, y, d);
                    model.color.set(x, y, c);
                    model.depth.set(x, y, d);
                    model.vertices.set(x, y, p);
                    model.normals.set(x, y, n);
                    model.hit.set(x, y, true);
                }
            }
        }
        SyntheticView { rgb, depth, model }
    }

    pub fn render(&self, pose: &Pose<f64>) -> SyntheticView {
        self.render_with(pose, &self.intrinsics)
    }

    /// Noisy frames along the trajectory, rendered on demand. The noise
    /// stream is the same as [`SyntheticScene::generate`]'s.
    pub fn frames(&self, seed: u64) -> impl Iterator<Item = Result<Frame, GeometryError>> + '_ {
        self.views(seed).map(|r| r.map(|(f, _)| f))
    }

    fn views(&self, seed: u64) -> impl Iterator<Item = Result<(Frame, SyntheticView), GeometryError>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.noise.depth_sigma.max(0.0)).expect("finite sigma");
        self.trajectory.iter().enumerate().map(move |(i, pose)| {
            let view = self.render(pose);
            let mut depth = view.depth.clone();
            // Sequential pass so the random stream is independent of threads.
            for d in depth.as_mut_slice() {
                if *d <= 0.0 {
                    continue;
                }
                if self.noise.dropout > 0.0 && rng.random::<f64>() < self.noise.dropout {
                    *d = 0.0;
                    continue;
                }
                if self.noise.depth_sigma > 0.0 {
                    let v = *d as f64 + normal.sample(&mut rng);
                    *d = if is_valid_depth(v as f32) { v as f32 } else { 0.0 };
                }
            }
            let ts = i as f64 / 30.0;
            let frame = Frame::new(view.rgb.clone(), depth, self.intrinsics, i, ts)?;
            Ok((frame, view))
        })
    }

    /// Renders the whole trajectory and applies the noise model.
    pub fn generate(&self, seed: u64) -> Result<SyntheticSequence, GeometryError> {
        let mut seq = SyntheticSequence {
            frames: Vec::with_capacity(self.trajectory.len()),
            poses: self.trajectory.clone(),
            reference_rgb: Vec::new(),
            reference_depth: Vec::new(),
        };
        for r in self.views(seed) {
            let (frame, view) = r?;
            seq.frames.push(frame);
            seq.reference_rgb.push(view.rgb);
            seq.reference_depth.push(view.depth);
        }
        Ok(seq)
    }
}

pub fn generate_synthetic(scene: &SyntheticScene, seed: u64) -> Result<SyntheticSequence, GeometryError> {
    scene.generate(seed)
}

/// Camera poses on a horizontal circle around `target`, all looking at it.
/// World y is up; the camera image y points down.
pub fn orbit(target: &Vector3<f64>, radius: f64, height: f64, start_deg: f64, step_deg: f64, n: usize) -> Vec<Pose<f64>> {
    (0..n)
        .map(|i| {
            let a = (start_deg + step_deg * i as f64).to_radians();
            let eye = target + Vector3::new(radius * a.sin(), height, -radius * a.cos());
            Pose::look_at(&eye, target, &Vector3::y())
        })
        .collect()
}

/// Desk-scale test scene: a small room with a table top and a few textured
/// objects, all within about a meter of the origin.
pub fn desk_scene(intrinsics: Intrinsics<f64>, trajectory: Vec<Pose<f64>>) -> SyntheticScene {
    let c = |r: f64, g: f64, b: f64| Vector3::new(r, g, b);
    let primitives = vec![
        Primitive {
            shape: Shape::Plane { normal: Vector3::y(), offset: -0.75 },
            texture: Texture::Checker { a: c(0.55, 0.5, 0.45), b: c(0.35, 0.3, 0.28), size: 0.3 },
        },
        Primitive {
            shape: Shape::Plane { normal: -Vector3::z(), offset: -0.9 },
            texture: Texture::Noise { base: c(0.6, 0.62, 0.7), amplitude: 0.5, max_frequency: 6.0, seed: 11 },
        },
        // Side and back walls close the room so every view ends nearby.
        Primitive {
            shape: Shape::Plane { normal: Vector3::x(), offset: -1.2 },
            texture: Texture::Noise { base: c(0.7, 0.6, 0.5), amplitude: 0.5, max_frequency: 5.0, seed: 17 },
        },
        Primitive {
            shape: Shape::Plane { normal: -Vector3::x(), offset: -1.2 },
            texture: Texture::Checker { a: c(0.75, 0.75, 0.7), b: c(0.5, 0.55, 0.6), size: 0.18 },
        },
        Primitive {
            shape: Shape::Plane { normal: Vector3::z(), offset: -1.2 },
            texture: Texture::Noise { base: c(0.5, 0.6, 0.55), amplitude: 0.4, max_frequency: 4.0, seed: 23 },
        },
        Primitive {
            // Table top.
            shape: Shape::Cuboid { min: c(-0.6, -0.1, -0.45), max: c(0.6, -0.05, 0.45) },
            texture: Texture::Noise { base: c(0.55, 0.4, 0.25), amplitude: 0.4, max_frequency: 12.0, seed: 5 },
        },
        Primitive {
            shape: Shape::Sphere { center: c(0.12, 0.05, 0.05), radius: 0.1 },
            texture: Texture::Checker { a: c(0.85, 0.2, 0.15), b: c(0.95, 0.85, 0.3), size: 0.04 },
        },
        Primitive {
            shape: Shape::Cuboid { min: c(-0.3, -0.05, -0.15), max: c(-0.12, 0.13, 0.05) },
            texture: Texture::Noise { base: c(0.2, 0.45, 0.7), amplitude: 0.6, max_frequency: 20.0, seed: 3 },
        },
        Primitive {
            shape: Shape::Cuboid { min: c(0.05, -0.05, -0.3), max: c(0.3, 0.03, -0.18) },
            texture: Texture::Checker { a: c(0.2, 0.6, 0.3), b: c(0.9, 0.9, 0.9), size: 0.035 },
        },
    ];
    SyntheticScene {
        primitives,
        trajectory,
        intrinsics,
        noise: NoiseModel::default(),
        light_dir: Vector3::new(0.3, -1.0, 0.4),
        ambient: 0.35,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene() -> SyntheticScene {
        let k = Intrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48, 1.0).unwrap();
        SyntheticScene {
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: Vector3::new(0.0, 0.0, 1.0), radius: 0.3 },
                texture: Texture::Constant(Vector3::repeat(0.5)),
            }],
            trajectory: vec![Pose::identity(); 2],
            intrinsics: k,
            noise: NoiseModel::default(),
            light_dir: Vector3::new(0.0, 0.0, 1.0),
            ambient: 0.2,
        }
    }

    #[test]
    fn sphere_depth_matches_closed_form() {
        let scene = sphere_scene();
        let seq = scene.generate(1).unwrap();
        let k = scene.intrinsics;
        let depth = &seq.frames[0].depth;
        let mut hits = 0;
        for y in 0..k.height {
            for x in 0..k.width {
                let u = (x as f64 - k.cx) / k.fx;
                let v = (y as f64 - k.cy) / k.fy;
                // |(u,v,1) z - c|² = r² with c = (0,0,1)
                let a = u * u + v * v + 1.0;
                let disc = 4.0 - 4.0 * a * (1.0 - 0.09);
                let d = depth.at(x, y) as f64;
                if disc >= 0.0 {
                    let z = (2.0 - disc.sqrt()) / (2.0 * a);
                    assert!((d - z).abs() < 1e-6, "{x},{y}: {d} vs {z}");
                    hits += 1;
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
        assert!(hits > 500);
    }

    #[test]
    fn dropout_rate_and_determinism() {
        let mut scene = sphere_scene();
        scene.noise = NoiseModel { depth_sigma: 0.001, dropout: 0.1 };
        let a = scene.generate(7).unwrap();
        let b = scene.generate(7).unwrap();
        assert_eq!(a.frames[1].depth, b.frames[1].depth);
        let valid = a.reference_depth[0].as_slice().iter().filter(|d| **d > 0.0).count() as f64;
        let kept = a.frames[0].depth.as_slice().iter().filter(|d| **d > 0.0).count() as f64;
        let dropped = 1.0 - kept / valid;
        // Binomial std at ~1500 pixels is under 1%.
        assert!((dropped - 0.1).abs() < 0.03, "dropped {dropped}");
        assert!(a.frames[0].depth.as_slice().iter().all(|&d| d == 0.0 || (0.1..=10.0).contains(&d)));
    }

    #[test]
    fn box_sdf_and_intersection_agree() {
        let s = Shape::Cuboid { min: Vector3::new(-1.0, -1.0, 2.0), max: Vector3::new(1.0, 1.0, 3.0) };
        assert!((s.sdf(&Vector3::new(0.0, 0.0, 1.5)) - 0.5).abs() < 1e-12);
        assert!((s.sdf(&Vector3::new(0.0, 0.0, 2.4)) + 0.4).abs() < 1e-12);
        let (t, n) = s.intersect(&Vector3::zeros(), &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert_eq!(n, Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn desk_scene_fills_the_view() {
        let k = Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60, 1.0).unwrap();
        let traj = orbit(&Vector3::zeros(), 0.8, 0.45, 0.0, 10.0, 3);
        let scene = desk_scene(k, traj);
        for p in &scene.trajectory {
            let v = scene.render(p);
            assert!(v.model.hit_count() as f64 > 0.95 * 4800.0);
            // Normals from the renderer face the camera.
            for i in 0..v.depth.len() {
                if v.model.hit.as_slice()[i] {
                    let to_cam = p.translation.cast::<f32>() - v.model.vertices.as_slice()[i];
                    assert!(v.model.normals.as_slice()[i].dot(&to_cam) > 0.0);
                }
            }
        }
    }
}
