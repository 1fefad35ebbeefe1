use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gps_core::eval::MetricReport;
use gps_core::io;
use gps_core::Image;

const SMALL_SCENE: &str = "\
preset = desk
camera.fx = 131.25
camera.fy = 131.25
camera.cx = 79.5
camera.cy = 59.5
camera.width = 160
camera.height = 120
trajectory.radius = 0.8
trajectory.height = 0.45
trajectory.step_deg = 1
trajectory.frames = 12
";

fn gps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gps"))
        .args(args)
        .env("GPS_THREADS", "1")
        .output()
        .expect("spawn gps")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn scene_file(dir: &Path) -> PathBuf {
    let path = dir.join("small.scene");
    fs::write(&path, SMALL_SCENE).unwrap();
    path
}

fn run_small(dir: &Path, name: &str) -> PathBuf {
    let scene = scene_file(dir);
    let out = dir.join(name);
    let o = gps(&["run", "--dataset", p(&scene), "--out", p(&out), "--eval-views", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn metrics(dir: &Path) -> MetricReport {
    MetricReport::parse_text(&fs::read_to_string(dir.join("metrics.txt")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gps(&[]).status.code(), Some(1));
    assert_eq!(gps(&["bogus"]).status.code(), Some(1));
    assert_eq!(gps(&["run", "--out", "x"]).status.code(), Some(1));
    assert_eq!(gps(&["--help"]).status.code(), Some(0));
    let o = gps(&["run", "--dataset", "/nonexistent/data", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn synth_writes_a_tum_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = scene_file(tmp.path());
    let out = tmp.path().join("data");
    let o = gps(&["synth", "--scene", p(&scene), "--out", p(&out), "--frames", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gps(&["synth", "--scene", p(&scene), "--out", p(&out), "--frames", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seq = io::load_tum(&out).unwrap();
    assert_eq!((seq.len(), seq.unmatched_rgb, seq.unmatched_depth), (5, 0, 0));
    assert_eq!(io::read_trajectory(&out.join("groundtruth.txt")).unwrap().len(), 5);
}

#[test]
fn run_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_small(tmp.path(), "a");
    for name in [
        "trajectory.txt",
        "mesh.ply",
        "gaussians.gpsf",
        "volume.gpsv",
        "timings.csv",
        "metrics.txt",
        "views.csv",
        "camera.txt",
        "config.txt",
    ] {
        assert!(a.join(name).is_file(), "missing {name}");
    }
    assert_eq!(io::read_trajectory(&a.join("trajectory.txt")).unwrap().len(), 12);
    assert_eq!(fs::read_dir(a.join("views")).unwrap().count(), 3);
    assert!(fs::read_dir(a.join("keyframes")).unwrap().count() >= 1);
    let m = metrics(&a);
    assert!(m.ate_rmse.unwrap() < 0.01);
    assert!(m.psnr.unwrap() > 20.0);

    let b = run_small(tmp.path(), "b");
    for name in ["trajectory.txt", "metrics.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }

    // A run scored against itself is perfect.
    let o = gps(&["eval", "--recon", p(&a), "--truth", p(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = MetricReport::parse_text(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(m.ate_rmse, Some(0.0));
    assert_eq!(m.psnr, Some(gps_core::eval::PSNR_CAP));
    assert!(m.geometry.unwrap().accuracy < 1e-9);

    // Rendering at a keyframe pose reproduces the stored keyframe image.
    let (ts, pose) = io::read_trajectory(&a.join("trajectory.txt")).unwrap()[0];
    let line = io::export::format_pose_line(ts, &pose);
    let pose_arg = line.split_once(' ').unwrap().1;
    let png = tmp.path().join("render.png");
    let o = gps(&[
        "render",
        "--gaussians",
        p(&a.join("gaussians.gpsf")),
        "--volume",
        p(&a.join("volume.gpsv")),
        "--pose",
        pose_arg,
        "--out",
        p(&png),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rendered = io::read_rgb(&png).unwrap();
    let stored = io::read_rgb(&a.join("keyframes").join(format!("{ts:.6}.png"))).unwrap();
    let mask = Image::filled(rendered.width(), rendered.height(), true);
    let db = gps_core::eval::psnr(&rendered, &stored, &mask).unwrap();
    assert!(db > 45.0, "render PSNR {db}");
    std::mem::forget(tmp);

    let o = gps(&[
        "render",
        "--gaussians",
        p(&a.join("gaussians.gpsf")),
        "--volume",
        p(&a.join("volume.gpsv")),
        "--pose",
        "1 2 3",
        "--out",
        p(&png),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tracking_loss_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = scene_file(tmp.path());
    let data = tmp.path().join("data");
    let o = gps(&["synth", "--scene", p(&scene), "--out", p(&data), "--frames", "3"]);
    assert!(o.status.success());
    let seq = io::load_tum(&data).unwrap();
    let blank = Image::filled(160, 120, 0.0f32);
    io::export_depth(&blank, seq.depth_scale, &data.join(&seq.associations[2].depth)).unwrap();
    let out = tmp.path().join("out");
    let o = gps(&["run", "--dataset", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = gps(&["run", "--dataset", p(&data), "--out", p(&out), "--set", "pipeline.continue_on_lost=true"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
