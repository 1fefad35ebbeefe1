//! Trajectories, PNG images, timing CSV and PLY meshes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::IoError;
use crate::geometry::Pose;
use crate::image::{ColorImage, DepthImage, Image};
use crate::pipeline::FrameTiming;
use crate::scalar::Real;
use crate::tsdf::TriangleMesh;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

/// One TUM trajectory line: `timestamp tx ty tz qx qy qz qw`.
pub fn format_pose_line(timestamp: f64, pose: &Pose<f64>) -> String {
    let q = pose.quaternion();
    let t = pose.translation;
    let vals = [t.x, t.y, t.z, q.i, q.j, q.k, q.w];
    let mut s = format!("{timestamp:.6}");
    for v in vals {
        // Nine decimals keep re-rendered poses within raycast tolerance;
        // tiny values print as 0 rather than "-0.000000000".
        let v = if v.abs() < 5e-10 { 0.0 } else { v };
        write!(s, " {v:.9}").expect("string write");
    }
    s
}

pub fn export_trajectory(poses: &[Pose<f64>], timestamps: &[f64], path: &Path) -> Result<(), IoError> {
    if poses.len() != timestamps.len() {
        return Err(IoError::format(
            path,
            format!("{} poses but {} timestamps", poses.len(), timestamps.len()),
        ));
    }
    let mut s = String::new();
    for (p, t) in poses.iter().zip(timestamps) {
        s.push_str(&format_pose_line(*t, p));
        s.push('\n');
    }
    write(path, s)
}

/// Parses a TUM trajectory text; `#` lines are comments.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<(f64, Pose<f64>)>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::format(path, format!("line {}: not a number", i + 1)))?;
        if vals.len() != 8 {
            return Err(IoError::format(path, format!("line {}: expected 8 fields, got {}", i + 1, vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-6) {
            return Err(IoError::format(path, format!("line {}: zero quaternion", i + 1)));
        }
        let pose = Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], pose));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose<f64>)>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_trajectory(&text, path)
}

/// `[0,1]` value to a byte: clamp, scale by 255, round half up.
#[inline]
pub fn to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn color_to_rgb8<T: Real>(img: &ColorImage<T>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.at(x as usize, y as usize);
        Rgb([to_byte(c.x.as_f64()), to_byte(c.y.as_f64()), to_byte(c.z.as_f64())])
    })
}

/// 8-bit RGB PNG.
pub fn export_image<T: Real>(img: &ColorImage<T>, path: &Path) -> Result<(), IoError> {
    color_to_rgb8(img).save(path).map_err(|e| IoError::image(path, e))
}

/// 16-bit depth PNG holding `round(depth · scale)`.
pub fn export_depth(depth: &DepthImage, scale: f64, path: &Path) -> Result<(), IoError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
        let d = depth.at(x as usize, y as usize) as f64 * scale;
        Luma([d.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    buf.save(path).map_err(|e| IoError::image(path, e))
}

pub fn read_rgb(path: &Path) -> Result<ColorImage<f32>, IoError> {
    let img = image::open(path).map_err(|e| IoError::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| Vector3::new(p[0] as f32, p[1] as f32, p[2] as f32) / 255.0)
        .collect();
    Ok(Image::from_vec(w as usize, h as usize, data).expect("buffer size"))
}

/// Reads a single-channel 16-bit depth PNG and divides by `scale`.
pub fn read_depth(path: &Path, scale: f64) -> Result<DepthImage, IoError> {
    let img = image::open(path).map_err(|e| IoError::image(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(IoError::format(
                path,
                format!("expected 16-bit single-channel depth, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| (p[0] as f64 / scale) as f32).collect();
    Ok(Image::from_vec(w as usize, h as usize, data).expect("buffer size"))
}

pub const TIMINGS_HEADER: &str = "frame,track_ms,fuse_ms,raycast_ms,optimize_ms";

pub fn timings_csv(records: &[FrameTiming]) -> String {
    let mut s = String::from(TIMINGS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{:.3}",
            r.frame, r.track_ms, r.fuse_ms, r.raycast_ms, r.optimize_ms
        )
        .expect("string write");
    }
    s
}

pub fn export_timings(records: &[FrameTiming], path: &Path) -> Result<(), IoError> {
    write(path, timings_csv(records))
}

/// ASCII PLY with per-vertex 8-bit colors.
pub fn export_mesh_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", mesh.vertices.len()).expect("string write");
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    writeln!(s, "element face {}", mesh.faces.len()).expect("string write");
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        let c = mesh.colors.get(i).copied().unwrap_or_else(Vector3::zeros);
        writeln!(
            s,
            "{} {} {} {} {} {}",
            v.x,
            v.y,
            v.z,
            to_byte(c.x as f64),
            to_byte(c.y as f64),
            to_byte(c.z as f64)
        )
        .expect("string write");
    }
    for f in &mesh.faces {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).expect("string write");
    }
    write(path, s)
}

/// Reads vertices and faces back from an ASCII PLY written by
/// [`export_mesh_ply`].
pub fn read_mesh_ply(path: &Path) -> Result<TriangleMesh, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let bad = |m: &str| IoError::format(path, m.to_string());
    let mut lines = text.lines();
    let (mut nv, mut nf) = (None, None);
    for line in lines.by_ref() {
        let line = line.trim();
        if let Some(n) = line.strip_prefix("element vertex ") {
            nv = n.trim().parse::<usize>().ok();
        } else if let Some(n) = line.strip_prefix("element face ") {
            nf = n.trim().parse::<usize>().ok();
        } else if line == "end_header" {
            break;
        } else if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(bad("only ASCII PLY is supported"));
        }
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("missing vertex count"))?, nf.ok_or_else(|| bad("missing face count"))?);
    let mut mesh = TriangleMesh::default();
    for _ in 0..nv {
        let vals: Vec<f32> = lines
            .next()
            .ok_or_else(|| bad("truncated vertex list"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad vertex")))
            .collect::<Result<_, _>>()?;
        if vals.len() < 3 {
            return Err(bad("bad vertex"));
        }
        mesh.vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
        let c = if vals.len() >= 6 {
            Vector3::new(vals[3], vals[4], vals[5]) / 255.0
        } else {
            Vector3::zeros()
        };
        mesh.colors.push(c);
    }
    for _ in 0..nf {
        let vals: Vec<u32> = lines
            .next()
            .ok_or_else(|| bad("truncated face list"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad face")))
            .collect::<Result<_, _>>()?;
        if vals.len() != 4 || vals[0] != 3 || vals[1..].iter().any(|&i| i as usize >= nv) {
            return Err(bad("only triangles with valid indices are supported"));
        }
        mesh.faces.push([vals[1], vals[2], vals[3]]);
    }
    Ok(mesh)
}
