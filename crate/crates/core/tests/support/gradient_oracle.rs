#![allow(dead_code)]
//! Independent reference for checking the analytic backward pass.
//!
//! The reference renderer below is written independently of the library: it
//! evaluates every Gaussian at every pixel by brute force with nalgebra's
//! quaternion and matrix inverse. The set of active (pixel, Gaussian) pairs,
//! the color clamps, the loss mask and the loss signs are frozen at the base
//! point, which makes the loss smooth in a neighborhood and lets central
//! differences converge to the true derivative.

use gps_core::splat::{backward, compose, forward, loss_l1, loss_mask, sh, GaussianSet, RenderConfig};
use gps_core::{Image, Intrinsics, Pose};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const W: usize = 32;
pub const H: usize = 24;

pub struct Scene {
    pub k: Intrinsics<f64>,
    pub pose: Pose<f64>,
    pub sdf_depth: Image<f32>,
    pub sdf_color: Image<Vector3<f32>>,
    pub target: Image<Vector3<f32>>,
    pub cfg: RenderConfig,
}

#[derive(Clone)]
pub struct Frozen {
    /// [gaussian][pixel]
    active: Vec<Vec<bool>>,
    clamp: Vec<[bool; 3]>,
    mask: Vec<bool>,
    sign: Vec<Vector3<f64>>,
    count: f64,
}

/// Independent SH evaluation up to degree 1; higher degrees reuse the
/// library basis, which has its own finite-difference test.
pub fn sh_color(raw: &[f64], dir: &Vector3<f64>, k: usize) -> Vector3<f64> {
    let mut b = [0.0; 16];
    if k > 4 {
        sh::basis(dir, k, &mut b);
    } else {
        let c1 = 0.4886025119029199;
        b[0] = 0.28209479177387814;
        b[1] = -c1 * dir.y;
        b[2] = c1 * dir.z;
        b[3] = -c1 * dir.x;
    }
    let mut c = Vector3::repeat(0.5);
    for j in 0..k {
        for ch in 0..3 {
            c[ch] += b[j] * raw[11 + 3 * j + ch];
        }
    }
    c
}

pub struct Eval {
    depth: f64,
    color: Vector3<f64>,
    alpha: Vec<f64>,
}

pub fn eval_gaussian(raw: &[f64], s: &Scene) -> Option<Eval> {
    let p = Vector3::new(raw[0], raw[1], raw[2]);
    let r_wc = s.pose.rotation.transpose();
    let t = r_wc * (p - s.pose.translation);
    if t.z <= s.cfg.near {
        return None;
    }
    let q = UnitQuaternion::from_quaternion(Quaternion::new(raw[6], raw[7], raw[8], raw[9]));
    let r = q.to_rotation_matrix().into_inner();
    let sc = Vector3::new(raw[3].exp(), raw[4].exp(), raw[5].exp());
    let cov = r * Matrix3::from_diagonal(&sc.component_mul(&sc)) * r.transpose();
    let j = Matrix2x3::new(
        s.k.fx / t.z,
        0.0,
        -s.k.fx * t.x / (t.z * t.z),
        0.0,
        s.k.fy / t.z,
        -s.k.fy * t.y / (t.z * t.z),
    );
    let cov2 = j * r_wc * cov * r_wc.transpose() * j.transpose() + Matrix2::identity() * 0.3;
    let inv = cov2.try_inverse()?;
    let center = Vector2::new(s.k.fx * t.x / t.z + s.k.cx, s.k.fy * t.y / t.z + s.k.cy);
    let sigma = 1.0 / (1.0 + (-raw[10]).exp());
    let alpha = (0..W * H)
        .map(|i| {
            let d = Vector2::new((i % W) as f64, (i / W) as f64) - center;
            sigma * (-0.5 * d.dot(&(inv * d))).exp()
        })
        .collect();
    let dir = (p - s.pose.translation).normalize();
    let k = (raw.len() - 11) / 3;
    Some(Eval {
        depth: t.z,
        color: sh_color(raw, &dir, k),
        alpha,
    })
}

/// Reference forward pass; returns (C_G, W_G) and the active sets it used.
pub fn reference(params: &GaussianSet<f64>, s: &Scene, frozen: Option<&Frozen>) -> (Vec<Vector3<f64>>, Vec<f64>, Vec<Vec<bool>>, Vec<[bool; 3]>) {
    let mut cg = vec![Vector3::zeros(); W * H];
    let mut wg = vec![0.0; W * H];
    let mut active = Vec::new();
    let mut clamps = Vec::new();
    for g in 0..params.len() {
        let Some(e) = eval_gaussian(params.raw(g), s) else {
            active.push(vec![false; W * H]);
            clamps.push([false; 3]);
            continue;
        };
        let clamp = match frozen {
            Some(f) => f.clamp[g],
            None => [e.color.x < 0.0, e.color.y < 0.0, e.color.z < 0.0],
        };
        let mut color = e.color;
        for ch in 0..3 {
            if clamp[ch] {
                color[ch] = 0.0;
            }
        }
        let mut act = vec![false; W * H];
        for i in 0..W * H {
            let on = match frozen {
                Some(f) => f.active[g][i],
                None => {
                    let d = s.sdf_depth.as_slice()[i];
                    let visible = d <= 0.0 || e.depth < d as f64 + s.cfg.epsilon;
                    visible && e.alpha[i] >= s.cfg.alpha_cutoff
                }
            };
            if on {
                cg[i] += color * e.alpha[i];
                wg[i] += e.alpha[i];
                act[i] = true;
            }
        }
        active.push(act);
        clamps.push(clamp);
    }
    (cg, wg, active, clamps)
}

pub fn freeze(params: &GaussianSet<f64>, s: &Scene) -> Frozen {
    let (cg, wg, active, clamp) = reference(params, s, None);
    let mut mask = vec![false; W * H];
    let mut sign = vec![Vector3::zeros(); W * H];
    let mut n = 0.0;
    for i in 0..W * H {
        mask[i] = s.sdf_depth.as_slice()[i] > 0.0 || wg[i] > 0.0;
        if mask[i] {
            n += 3.0;
            let ct = s.sdf_color.as_slice()[i].cast::<f64>();
            let c = (ct + cg[i]) / (1.0 + wg[i]);
            let d = c - s.target.as_slice()[i].cast::<f64>();
            sign[i] = d.map(|v| v.signum());
        }
    }
    Frozen {
        active,
        clamp,
        mask,
        sign,
        count: n,
    }
}

/// Loss with every discrete choice frozen: a smooth function of the params.
pub fn frozen_loss(params: &GaussianSet<f64>, s: &Scene, f: &Frozen) -> f64 {
    let (cg, wg, _, _) = reference(params, s, Some(f));
    let mut l = 0.0;
    for i in 0..W * H {
        if f.mask[i] {
            let ct = s.sdf_color.as_slice()[i].cast::<f64>();
            let c = (ct + cg[i]) / (1.0 + wg[i]);
            l += f.sign[i].dot(&(c - s.target.as_slice()[i].cast::<f64>()));
        }
    }
    l / f.count
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, set: &mut GaussianSet<f64>, k: &Intrinsics<f64>) {
    let z: f64 = rng.random_range(0.6..1.4);
    let u: f64 = rng.random_range(6.0..(W as f64 - 6.0));
    let v: f64 = rng.random_range(5.0..(H as f64 - 5.0));
    let p = k.unproject(u, v, z);
    let mut raw = vec![p.x, p.y, p.z];
    for _ in 0..3 {
        raw.push(rng.random_range(0.012f64..0.05).ln());
    }
    for _ in 0..4 {
        raw.push(rng.random_range(-1.0..1.0));
    }
    raw.push(rng.random_range(-1.0..2.0));
    let coeffs = (set.stride() - 11) / 3;
    for j in 0..coeffs {
        let amp = if j == 0 { 1.0 } else { 0.4 };
        for _ in 0..3 {
            raw.push(rng.random_range(-amp..amp));
        }
    }
    let mut data = set.params().to_vec();
    data.extend(raw);
    *set = GaussianSet::from_params(set.sh_degree(), data).unwrap();
}

pub fn random_scene(rng: &mut ChaCha8Rng, near_depth: f64) -> Scene {
    let k = intrinsics();
    let sdf_depth = Image::from_fn(W, H, |_, _| {
        let r: f64 = rng.random();
        if r < 0.2 {
            0.0
        } else if r < 0.3 {
            // In front of everything: culls every Gaussian here.
            (near_depth - 0.2) as f32
        } else {
            rng.random_range(1.5f32..3.0)
        }
    });
    let sdf_color = Image::from_fn(W, H, |x, y| {
        if sdf_depth.at(x, y) > 0.0 {
            Vector3::new(rng.random(), rng.random(), rng.random())
        } else {
            Vector3::zeros()
        }
    });
    let target = Image::from_fn(W, H, |_, _| Vector3::new(rng.random(), rng.random(), rng.random()));
    Scene {
        k,
        pose: Pose::identity(),
        sdf_depth,
        sdf_color,
        target,
        cfg: RenderConfig::default(),
    }
}

pub fn analytic(params: &GaussianSet<f64>, s: &Scene) -> (f64, Vec<f64>) {
    let r = forward(params, &s.pose, &s.k, &s.sdf_depth, &s.cfg);
    let c = compose(&s.sdf_color, &r);
    let m = loss_mask(&(s.sdf_depth.map(|d| *d > 0.0)), &r.weight);
    let l = loss_l1(&c, &s.target, &m);
    let g = backward(params, &s.pose, &s.k, &s.sdf_depth, &s.sdf_color, &r, &l.grad, &s.cfg);
    (l.value, g.data)
}

/// Largest relative error between analytic and extrapolated central-difference
/// gradients over the components where either exceeds `floor` in magnitude.
pub fn check(params: &GaussianSet<f64>, s: &Scene, floor: f64) -> f64 {
    let f = freeze(params, s);
    let (value, grad) = analytic(params, s);
    let base = frozen_loss(params, s, &f);
    assert!((value - base).abs() < 1e-12, "loss mismatch {value} vs {base}");
    let h = 1e-4;
    let stride = params.stride();
    let mut worst: f64 = 0.0;
    for g in 0..params.len() {
        for j in 0..stride {
            let central = |h: f64| {
                let mut plus = params.clone();
                plus.raw_mut(g)[j] += h;
                let mut minus = params.clone();
                minus.raw_mut(g)[j] -= h;
                (frozen_loss(&plus, s, &f) - frozen_loss(&minus, s, &f)) / (2.0 * h)
            };
            // Richardson extrapolation cancels the h^2 error term, which is
            // visible on positions of centimeter-sized Gaussians.
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let a = grad[g * stride + j];
            let m = fd.abs().max(a.abs());
            if m > floor {
                worst = worst.max((a - fd).abs() / m);
            }
        }
    }
    worst
}

/// `n` Gaussians crowded into the image center so that they overlap.
pub fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (GaussianSet<f64>, Scene) {
    let k = intrinsics();
    let mut set = GaussianSet::new(1);
    for _ in 0..n {
        random_gaussian(rng, &mut set, &k);
    }
    let near = (0..n).map(|i| set.position(i).z).fold(f64::INFINITY, f64::min);
    let s = random_scene(rng, near);
    (set, s)
}

pub fn intrinsics() -> Intrinsics<f64> {
    Intrinsics::new(40.0, 40.0, 15.5, 11.5, W, H, 1.0).unwrap()
}
