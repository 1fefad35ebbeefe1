use std::path::PathBuf;

use gps_core::eval;
use gps_core::geometry::{back_project, compute_normals};
use gps_core::io::synthetic::{orbit, Primitive, Shape, SyntheticScene, Texture};
use gps_core::io::{self, tum};
use gps_core::lifecycle::{self, LifecycleConfig};
use gps_core::splat::GaussianSet;
use gps_core::tsdf::{TsdfConfig, TsdfVolume};
use gps_core::{Image, Intrinsics, Pose, Twist};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose<f64>> {
    (vec3(3.0), vec3(2.0)).prop_map(|(w, t)| Pose::from_quaternion(&UnitQuaternion::from_scaled_axis(w), t))
}

fn small_intrinsics() -> Intrinsics<f64> {
    Intrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48, 1.0).unwrap()
}

fn sphere_scene(frames: usize, step_deg: f64) -> SyntheticScene {
    let k = small_intrinsics();
    SyntheticScene {
        primitives: vec![Primitive {
            shape: Shape::Sphere { center: Vector3::zeros(), radius: 0.3 },
            texture: Texture::Checker { a: Vector3::new(0.9, 0.2, 0.1), b: Vector3::new(0.1, 0.3, 0.8), size: 0.07 },
        }],
        trajectory: orbit(&Vector3::zeros(), 1.0, 0.2, 0.0, step_deg, frames),
        intrinsics: k,
        noise: Default::default(),
        light_dir: Vector3::new(0.3, -1.0, 0.4),
        ambient: 0.4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_inverse_composes_to_identity(p in pose()) {
        let id = p.inverse().compose(&p);
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
        prop_assert!(id.translation.norm() < 1e-9);
        prop_assert!(p.orthonormality_error() < 1e-9);
    }

    #[test]
    fn twist_exp_is_a_rigid_motion(w in vec3(3.0), v in vec3(1.0)) {
        let p = Twist::new(w, v).exp();
        prop_assert!(p.orthonormality_error() < 1e-9);
        prop_assert!(p.rotation.determinant() > 0.0);
    }

    #[test]
    fn projection_inverts_unprojection(u in 0.0..64.0f64, v in 0.0..48.0f64, z in 0.1..8.0f64) {
        let k = small_intrinsics();
        let p = k.unproject(u, v, z);
        let q = k.project(&p).unwrap();
        prop_assert!((q.x - u).abs() < 1e-9 && (q.y - v).abs() < 1e-9);
        prop_assert!((p.z - z).abs() < 1e-12);
    }

    #[test]
    fn normals_are_unit_or_flagged(seed in 0u64..500, holes in 0.0..0.5f64) {
        let k = small_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = Image::from_fn(64, 48, |_, _| if rng.random::<f64>() < holes { 0.0 } else { rng.random_range(0.5f32..3.0) });
        let frame = gps_core::Frame::new(Image::filled(64, 48, Vector3::zeros()), depth, k, 0, 0.0).unwrap();
        let maps = compute_normals(&back_project(&frame));
        for i in 0..maps.normals.len() {
            let n = maps.normals.as_slice()[i];
            prop_assert!(n.iter().all(|c| c.is_finite()));
            if maps.normal_valid.as_slice()[i] {
                prop_assert!(maps.valid.as_slice()[i]);
                prop_assert!((n.norm() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rigid_alignment_recovers_transform(p in pose(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Vector3<f64>> = (0..20).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|s| p.transform_point(s)).collect();
        let a = eval::align_rigid(&src, &dst);
        for (s, d) in src.iter().zip(&dst) {
            prop_assert!((a.transform_point(s) - d).norm() < 1e-8);
        }
    }

    #[test]
    fn image_metrics_stay_in_range(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Image::from_fn(24, 20, |_, _| Vector3::new(rng.random::<f32>(), rng.random(), rng.random()));
        let (a, b) = (img(), img());
        let mask = Image::filled(24, 20, true);
        let s = eval::ssim(&a, &b, &mask).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(eval::psnr(&a, &b, &mask).unwrap() <= eval::psnr(&a, &a, &mask).unwrap());
    }

    #[test]
    fn sample_pixels_picks_masked_pixels(seed in 0u64..1000, density in 0.01..1.0f64, fraction in 0.01..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Image::from_fn(30, 20, |_, _| rng.random::<f64>() < density);
        let picks = lifecycle::sample_pixels(&mask, fraction, &mut rng);
        let m = mask.count();
        if m == 0 {
            prop_assert!(picks.is_empty());
        } else {
            prop_assert_eq!(picks.len(), ((fraction * m as f64).ceil() as usize).clamp(1, m));
            let mut seen = std::collections::HashSet::new();
            for &(x, y) in &picks {
                prop_assert!(mask.at(x, y));
                prop_assert!(seen.insert((x, y)));
            }
        }
    }

    #[test]
    fn view_selection_sizes(keyframes in 0usize..20, recent in 1usize..15, seed in 0u64..100) {
        let cfg = LifecycleConfig::default();
        let sel = lifecycle::select_views(keyframes, recent, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(sel.global.len(), keyframes.min(cfg.n_global));
        prop_assert!(sel.global.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sel.global.iter().all(|&g| g < keyframes));
        prop_assert_eq!(sel.local.len(), recent.min(cfg.n_local));
        prop_assert_eq!(*sel.local.last().unwrap(), recent - 1);
    }

    #[test]
    fn association_is_sorted_and_close(seed in 0u64..1000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb: Vec<(f64, PathBuf)> = (0..n).map(|i| (i as f64 * 0.033, PathBuf::from(format!("r{i}")))).collect();
        let depth: Vec<(f64, PathBuf)> = (0..n)
            .map(|i| (i as f64 * 0.033 + rng.random_range(-0.03..0.03), PathBuf::from(format!("d{i}"))))
            .collect();
        let (pairs, _, _) = tum::associate(&rgb, &depth);
        prop_assert!(pairs.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        let depth_time = |p: &PathBuf| depth.iter().find(|d| &d.1 == p).unwrap().0;
        for a in &pairs {
            prop_assert!((depth_time(&a.depth) - a.timestamp).abs() <= tum::MAX_PAIR_GAP);
        }
    }

    #[test]
    fn trajectory_lines_round_trip(p in pose(), t in 0.0..1e5f64) {
        let line = io::export::format_pose_line(t, &p);
        let parsed = io::export::parse_trajectory(&line, std::path::Path::new("mem")).unwrap();
        let (t2, q) = parsed[0];
        prop_assert!((t2 - t).abs() < 1e-6);
        prop_assert!((q.translation - p.translation).norm() < 1e-8);
        prop_assert!(q.inverse().compose(&p).rotation_angle() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Fused voxels stay within their ranges and raycast outputs agree on
    /// which pixels hit the surface.
    #[test]
    fn fusion_and_raycast_invariants(frames in 1usize..5, step in 2.0..20.0f64, voxel in 0.01..0.03f32) {
        let scene = sphere_scene(frames, step);
        let cfg = TsdfConfig { voxel_size: voxel, ..Default::default() };
        let mut vol = TsdfVolume::new(cfg).unwrap();
        for (f, pose) in scene.frames(0).zip(&scene.trajectory) {
            let f = f.unwrap();
            vol.allocate(&f, pose).unwrap();
            vol.integrate(&f, pose);
        }
        for b in vol.blocks() {
            prop_assert!(vol.block(&b.coord).is_some());
            for v in b.voxels.iter() {
                prop_assert!(v.tsdf.abs() <= 1.0);
                prop_assert!((0.0..=cfg.max_weight).contains(&v.weight));
                prop_assert!(v.color.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
        prop_assert!(vol.block(&Vector3::new(10_000, 0, 0)).is_none());
        let r = vol.raycast(&scene.trajectory[0], &scene.intrinsics);
        for i in 0..r.hit.len() {
            let hit = r.hit.as_slice()[i];
            prop_assert_eq!(r.depth.as_slice()[i] > 0.0, hit);
            prop_assert_eq!(r.vertices.as_slice()[i].iter().all(|c| c.is_finite()) && hit, hit);
        }
    }

    /// Spawned Gaussians are surface discs that pass the removal test.
    #[test]
    fn spawn_shape_laws(seed in 0u64..100, fraction in 0.05..1.0f64) {
        let scene = sphere_scene(1, 1.0);
        let mut vol = TsdfVolume::new(TsdfConfig { voxel_size: 0.01, ..Default::default() }).unwrap();
        let f = scene.frames(0).next().unwrap().unwrap();
        let pose = scene.trajectory[0];
        vol.allocate(&f, &pose).unwrap();
        vol.integrate(&f, &pose);
        let r = vol.raycast(&pose, &scene.intrinsics);
        let cfg = LifecycleConfig { sample_fraction: fraction, ..Default::default() };
        let born = lifecycle::spawn::<f64, _>(&r.hit, &r.vertices, &r.normals, &f.rgb, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(!born.is_empty());
        let mut set = GaussianSet::new(1);
        for g in &born {
            let s = g.scale();
            prop_assert!((s.x - s.y).abs() < 1e-12);
            prop_assert!((s.z - 0.1 * s.x).abs() < 1e-12);
            prop_assert!(s.x <= cfg.max_init_scale + 1e-12);
            prop_assert!((g.opacity() - cfg.initial_opacity).abs() < 1e-12);
            set.push(g);
        }
        let keep = lifecycle::removal_mask(&set, &cfg);
        for (i, k) in keep.iter().enumerate() {
            let s = set.scale(i).max();
            let o = set.opacity(i);
            prop_assert_eq!(*k, o >= cfg.min_opacity && s <= cfg.max_scale && s >= cfg.min_scale);
        }
    }
}
