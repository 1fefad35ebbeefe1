//! Text descriptions of synthetic scenes, in the same `key = value` format as
//! the pipeline configuration:
//!
//! ```text
//! preset = desk
//! camera.width = 320
//! trajectory.frames = 200
//! noise.depth_sigma = 0.002
//! primitive.0.type = sphere
//! primitive.0.center = 0.1, 0.05, 0.05
//! primitive.0.radius = 0.1
//! primitive.0.texture = checker
//! primitive.0.color_a = 0.9, 0.2, 0.1
//! ```
//!
//! Primitives listed in the file are appended to the preset's.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::synthetic::{desk_scene, orbit, NoiseModel, Primitive, Shape, SyntheticScene, Texture};
use crate::geometry::Intrinsics;
use crate::pipeline::{parse_key_values, ConfigError};

#[derive(Clone, Debug, PartialEq)]
pub struct OrbitSpec {
    pub target: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
    pub start_deg: f64,
    pub step_deg: f64,
    pub frames: usize,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            target: Vector3::zeros(),
            radius: 0.8,
            height: 0.45,
            start_deg: 0.0,
            step_deg: 0.5,
            frames: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
    pub intrinsics: Intrinsics<f64>,
    pub orbit: OrbitSpec,
    pub noise: NoiseModel,
    pub light_dir: Vector3<f64>,
    pub ambient: f64,
}

/// 320×240 camera with the 525 px focal length of a 640×480 sensor halved.
pub fn default_intrinsics() -> Intrinsics<f64> {
    Intrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240, 1.0).expect("valid defaults")
}

impl SceneDescription {
    /// The desk preset with the default camera and orbit.
    pub fn desk() -> Self {
        let k = default_intrinsics();
        let s = desk_scene(k, Vec::new());
        Self {
            primitives: s.primitives,
            intrinsics: k,
            orbit: OrbitSpec::default(),
            noise: s.noise,
            light_dir: s.light_dir,
            ambient: s.ambient,
        }
    }

    /// Builds the scene with `frames` poses (the described count if `None`).
    pub fn build(&self, frames: Option<usize>) -> SyntheticScene {
        let o = &self.orbit;
        SyntheticScene {
            primitives: self.primitives.clone(),
            trajectory: orbit(&o.target, o.radius, o.height, o.start_deg, o.step_deg, frames.unwrap_or(o.frames)),
            intrinsics: self.intrinsics,
            noise: self.noise,
            light_dir: self.light_dir,
            ambient: self.ambient,
        }
    }
}

fn bad(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        message: message.into(),
    }
}

fn num(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse().map_err(|_| bad(line, format!("bad number `{v}` for `{key}`")))
}

fn vec3(line: usize, key: &str, v: &str) -> Result<Vector3<f64>, ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad(line, format!("`{key}` needs three comma-separated numbers")));
    }
    Ok(Vector3::new(num(line, key, parts[0])?, num(line, key, parts[1])?, num(line, key, parts[2])?))
}

/// Per-primitive key table with the line each key came from.
type Fields = BTreeMap<String, (usize, String)>;

fn get<'a>(f: &'a Fields, idx: usize, name: &str) -> Result<(usize, &'a str), ConfigError> {
    f.get(name)
        .map(|(l, v)| (*l, v.as_str()))
        .ok_or_else(|| bad(0, format!("primitive.{idx}.{name} is required")))
}

fn build_primitive(idx: usize, f: &Fields) -> Result<Primitive, ConfigError> {
    let (l, ty) = get(f, idx, "type")?;
    let v3 = |name: &str| -> Result<Vector3<f64>, ConfigError> {
        let (l, v) = get(f, idx, name)?;
        vec3(l, name, v)
    };
    let n = |name: &str| -> Result<f64, ConfigError> {
        let (l, v) = get(f, idx, name)?;
        num(l, name, v)
    };
    let shape = match ty {
        "sphere" => Shape::Sphere {
            center: v3("center")?,
            radius: n("radius")?,
        },
        "box" => Shape::Cuboid {
            min: v3("min")?,
            max: v3("max")?,
        },
        "plane" => Shape::Plane {
            normal: v3("normal")?
                .try_normalize(1e-12)
                .ok_or_else(|| bad(l, "plane normal must be non-zero"))?,
            offset: n("offset")?,
        },
        other => return Err(bad(l, format!("unknown primitive type `{other}`"))),
    };
    let texture = match f.get("texture").map(|(l, v)| (*l, v.as_str())) {
        None | Some((_, "constant")) => Texture::Constant(if f.contains_key("color") {
            v3("color")?
        } else {
            Vector3::repeat(0.5)
        }),
        Some((_, "checker")) => Texture::Checker {
            a: v3("color_a")?,
            b: v3("color_b")?,
            size: n("size")?,
        },
        Some((_, "noise")) => Texture::Noise {
            base: v3("base")?,
            amplitude: n("amplitude")?,
            max_frequency: n("max_frequency")?,
            seed: n("seed")? as u64,
        },
        Some((l, other)) => return Err(bad(l, format!("unknown texture `{other}`"))),
    };
    Ok(Primitive { shape, texture })
}

pub fn parse_scene(text: &str) -> Result<SceneDescription, ConfigError> {
    let entries = parse_key_values(text)?;
    let mut d = match entries.iter().find(|(_, k, _)| k == "preset") {
        Some((_, _, v)) if v == "desk" => SceneDescription::desk(),
        Some((l, _, v)) if v != "none" => return Err(bad(*l, format!("unknown preset `{v}`"))),
        _ => SceneDescription {
            primitives: Vec::new(),
            ..SceneDescription::desk()
        },
    };
    let k = d.intrinsics;
    let mut cam = [k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64];
    let mut prims: BTreeMap<usize, Fields> = BTreeMap::new();
    for (line, key, v) in &entries {
        let (line, v) = (*line, v.as_str());
        match key.as_str() {
            "preset" => {}
            "camera.fx" => cam[0] = num(line, key, v)?,
            "camera.fy" => cam[1] = num(line, key, v)?,
            "camera.cx" => cam[2] = num(line, key, v)?,
            "camera.cy" => cam[3] = num(line, key, v)?,
            "camera.width" => cam[4] = num(line, key, v)?,
            "camera.height" => cam[5] = num(line, key, v)?,
            "trajectory.target" => d.orbit.target = vec3(line, key, v)?,
            "trajectory.radius" => d.orbit.radius = num(line, key, v)?,
            "trajectory.height" => d.orbit.height = num(line, key, v)?,
            "trajectory.start_deg" => d.orbit.start_deg = num(line, key, v)?,
            "trajectory.step_deg" => d.orbit.step_deg = num(line, key, v)?,
            "trajectory.frames" => d.orbit.frames = num(line, key, v)? as usize,
            "noise.depth_sigma" => d.noise.depth_sigma = num(line, key, v)?,
            "noise.dropout" => d.noise.dropout = num(line, key, v)?,
            "light.direction" => d.light_dir = vec3(line, key, v)?,
            "light.ambient" => d.ambient = num(line, key, v)?,
            k if k.starts_with("primitive.") => {
                let mut it = k.splitn(3, '.').skip(1);
                let (Some(idx), Some(field)) = (it.next(), it.next()) else {
                    return Err(bad(line, format!("expected primitive.<index>.<field>, got `{k}`")));
                };
                let idx: usize = idx.parse().map_err(|_| bad(line, format!("bad primitive index in `{k}`")))?;
                prims.entry(idx).or_default().insert(field.to_string(), (line, v.to_string()));
            }
            other => return Err(bad(line, format!("unknown key `{other}`"))),
        }
    }
    d.intrinsics = Intrinsics::new(cam[0], cam[1], cam[2], cam[3], cam[4] as usize, cam[5] as usize, 1.0)
        .map_err(|e| bad(0, e.to_string()))?;
    for (idx, f) in &prims {
        d.primitives.push(build_primitive(*idx, f)?);
    }
    if d.primitives.is_empty() {
        return Err(bad(0, "scene has no primitives"));
    }
    if !(d.noise.depth_sigma >= 0.0) || !(0.0..=1.0).contains(&d.noise.dropout) {
        return Err(bad(0, "noise.depth_sigma must be >= 0 and noise.dropout in [0, 1]"));
    }
    Ok(d)
}
