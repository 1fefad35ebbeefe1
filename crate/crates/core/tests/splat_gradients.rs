//! Finite-difference check of the analytic backward pass against the
//! independent reference renderer in `support/gradient_oracle.rs`.

#[path = "support/gradient_oracle.rs"]
mod gradient_oracle;

use gps_core::splat::{backward, forward, GaussianSet};
use gps_core::{Image, Pose};
use gradient_oracle::*;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn single_gaussian_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nonzero = 0;
    for _ in 0..100 {
        let mut set = GaussianSet::new(1);
        random_gaussian(&mut rng, &mut set, &intrinsics());
        let z = set.position(0).z;
        let s = random_scene(&mut rng, z);
        assert!(check(&set, &s, 1e-6) < 1e-3);
        let (_, g) = analytic(&set, &s);
        nonzero += g.iter().any(|v| *v != 0.0) as usize;
    }
    assert!(nonzero > 90);
}

#[test]
fn overlapping_gaussians_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let k = intrinsics();
    for _ in 0..15 {
        let mut set = GaussianSet::new(1);
        for _ in 0..5 {
            random_gaussian(&mut rng, &mut set, &k);
        }
        let s = random_scene(&mut rng, 0.6);
        assert!(check(&set, &s, 1e-6) < 1e-3);
    }
}

#[test]
fn higher_degree_sh_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = intrinsics();
    for degree in [0, 2, 3] {
        for _ in 0..5 {
            let mut set = GaussianSet::new(degree);
            random_gaussian(&mut rng, &mut set, &k);
            random_gaussian(&mut rng, &mut set, &k);
            let mut s = random_scene(&mut rng, 0.6);
            // Off-origin camera so the view direction varies.
            s.pose = Pose::look_at(&Vector3::new(0.05, -0.03, -0.02), &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(0.0, -1.0, 0.0));
            assert!(check(&set, &s, 1e-6) < 1e-3);
        }
    }
}

#[test]
fn zero_upstream_and_culled_gaussians_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = intrinsics();
    let mut set = GaussianSet::new(1);
    random_gaussian(&mut rng, &mut set, &k);
    let s = random_scene(&mut rng, 0.6);
    let r = forward(&set, &s.pose, &s.k, &s.sdf_depth, &s.cfg);
    let zero = Image::filled(W, H, Vector3::zeros());
    let g = backward(&set, &s.pose, &s.k, &s.sdf_depth, &s.sdf_color, &r, &zero, &s.cfg);
    assert!(g.data.iter().all(|v| *v == 0.0));

    // A wall in front of the Gaussian everywhere.
    let mut wall = s;
    wall.sdf_depth = Image::filled(W, H, (set.position(0).z - 0.1) as f32);
    let (_, g) = analytic(&set, &wall);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let k = intrinsics();
    let mut set = GaussianSet::new(1);
    for _ in 0..12 {
        random_gaussian(&mut rng, &mut set, &k);
    }
    let s = random_scene(&mut rng, 0.6);
    let (cg, wg, _, _) = reference(&set, &s, None);
    let r = forward(&set, &s.pose, &s.k, &s.sdf_depth, &s.cfg);
    for i in 0..W * H {
        assert!((r.weight.as_slice()[i] - wg[i]).abs() < 1e-12);
        assert!((r.color.as_slice()[i] - cg[i]).norm() < 1e-12);
    }
}
