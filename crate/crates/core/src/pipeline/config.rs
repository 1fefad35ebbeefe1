use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::lifecycle::LifecycleConfig;
use crate::splat::{LearningRates, RenderConfig};
use crate::tracking::IcpConfig;
use crate::tsdf::TsdfConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Frames between Gaussian rounds.
    pub delta_k: usize,
    /// Optimizer iterations per round.
    pub iterations: usize,
    pub tsdf: TsdfConfig,
    pub tracking: IcpConfig,
    pub render: RenderConfig,
    pub lifecycle: LifecycleConfig,
    pub optimizer: LearningRates,
    /// Run Gaussian rounds on a worker thread, overlapping the next interval.
    pub parallel: bool,
    /// Disable to get a pure SDF reconstruction.
    pub gaussians: bool,
    /// Keep going at the last pose when tracking fails instead of aborting.
    pub continue_on_lost: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            delta_k: 10,
            iterations: 20,
            tsdf: TsdfConfig::default(),
            tracking: IcpConfig::default(),
            render: RenderConfig::default(),
            lifecycle: LifecycleConfig::default(),
            optimizer: LearningRates::default(),
            parallel: false,
            gaussians: true,
            continue_on_lost: false,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

/// Splits `key = value` lines, dropping blanks and `#` comments. Returned
/// line numbers are 1-based.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    /// Sets one namespaced key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "pipeline.delta_k" => self.delta_k = parse(key, v)?,
            "pipeline.iterations" => self.iterations = parse(key, v)?,
            "pipeline.parallel" => self.parallel = parse_bool(key, v)?,
            "pipeline.gaussians" => self.gaussians = parse_bool(key, v)?,
            "pipeline.continue_on_lost" => self.continue_on_lost = parse_bool(key, v)?,
            "pipeline.seed" => self.seed = parse(key, v)?,
            "tsdf.voxel_size" => self.tsdf.voxel_size = parse(key, v)?,
            "tsdf.truncation" => self.tsdf.truncation = Some(parse(key, v)?),
            "tsdf.max_weight" => self.tsdf.max_weight = parse(key, v)?,
            "tsdf.block_budget" => self.tsdf.block_budget = parse(key, v)?,
            "tracking.levels" => self.tracking.levels = parse(key, v)?,
            "tracking.iterations" => {
                self.tracking.iterations = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "tracking.max_distance" => self.tracking.max_distance = parse(key, v)?,
            "tracking.max_angle_deg" => self.tracking.max_angle_deg = parse(key, v)?,
            "tracking.epsilon" => self.tracking.epsilon = parse(key, v)?,
            "render.epsilon" => self.render.epsilon = parse(key, v)?,
            "render.sh_degree" => self.render.sh_degree = parse(key, v)?,
            "render.alpha_cutoff" => self.render.alpha_cutoff = parse(key, v)?,
            "render.near" => self.render.near = parse(key, v)?,
            "lifecycle.color_threshold" => self.lifecycle.color_threshold = parse(key, v)?,
            "lifecycle.weight_threshold" => self.lifecycle.weight_threshold = parse(key, v)?,
            "lifecycle.sample_fraction" => self.lifecycle.sample_fraction = parse(key, v)?,
            "lifecycle.keyframe_angle_deg" => self.lifecycle.keyframe_angle_deg = parse(key, v)?,
            "lifecycle.keyframe_translation" => self.lifecycle.keyframe_translation = parse(key, v)?,
            "lifecycle.n_global" => self.lifecycle.n_global = parse(key, v)?,
            "lifecycle.n_local" => self.lifecycle.n_local = parse(key, v)?,
            "lifecycle.min_opacity" => self.lifecycle.min_opacity = parse(key, v)?,
            "lifecycle.max_scale" => self.lifecycle.max_scale = parse(key, v)?,
            "lifecycle.min_scale" => self.lifecycle.min_scale = parse(key, v)?,
            "lifecycle.initial_opacity" => self.lifecycle.initial_opacity = parse(key, v)?,
            "lifecycle.max_init_scale" => self.lifecycle.max_init_scale = parse(key, v)?,
            "lifecycle.fallback_scale" => self.lifecycle.fallback_scale = parse(key, v)?,
            "optimizer.lr_position" => self.optimizer.position = parse(key, v)?,
            "optimizer.lr_sh0" => self.optimizer.sh0 = parse(key, v)?,
            "optimizer.lr_sh_rest" => self.optimizer.sh_rest = parse(key, v)?,
            "optimizer.lr_opacity" => self.optimizer.opacity = parse(key, v)?,
            "optimizer.lr_scale" => self.optimizer.scale = parse(key, v)?,
            "optimizer.lr_rotation" => self.optimizer.rotation = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies every line of a key=value file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (line, k, v) in parse_key_values(text)? {
            self.set(&k, &v).map_err(|e| ConfigError::Syntax {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &dyn Display| Err(ConfigError::Invalid(m.to_string()));
        if self.delta_k < 1 {
            return bad(&"pipeline.delta_k must be at least 1");
        }
        if self.iterations < 1 {
            return bad(&"pipeline.iterations must be at least 1");
        }
        if !(self.tsdf.voxel_size > 0.0) || !(self.tsdf.truncation() > 0.0) || !(self.tsdf.max_weight > 0.0) {
            return bad(&"tsdf sizes must be positive");
        }
        if let Err(e) = self.tracking.validate() {
            return bad(&e);
        }
        if self.render.sh_degree > crate::splat::MAX_SH_DEGREE {
            return bad(&"render.sh_degree must be at most 3");
        }
        if !(self.render.epsilon >= 0.0) || !(self.render.alpha_cutoff > 0.0 && self.render.alpha_cutoff < 1.0) {
            return bad(&"render.epsilon must be non-negative and render.alpha_cutoff in (0, 1)");
        }
        if let Err(e) = self.lifecycle.validate() {
            return bad(&e);
        }
        Ok(())
    }

    /// Writes every key with its current value, in `set` order.
    pub fn to_text(&self) -> String {
        let t = &self.tracking;
        let l = &self.lifecycle;
        let o = &self.optimizer;
        let iters: Vec<String> = t.iterations.iter().map(|i| i.to_string()).collect();
        let lines = [
            format!("pipeline.delta_k = {}", self.delta_k),
            format!("pipeline.iterations = {}", self.iterations),
            format!("pipeline.parallel = {}", self.parallel),
            format!("pipeline.gaussians = {}", self.gaussians),
            format!("pipeline.continue_on_lost = {}", self.continue_on_lost),
            format!("pipeline.seed = {}", self.seed),
            format!("tsdf.voxel_size = {}", self.tsdf.voxel_size),
            format!("tsdf.truncation = {}", self.tsdf.truncation()),
            format!("tsdf.max_weight = {}", self.tsdf.max_weight),
            format!("tsdf.block_budget = {}", self.tsdf.block_budget),
            format!("tracking.levels = {}", t.levels),
            format!("tracking.iterations = {}", iters.join(",")),
            format!("tracking.max_distance = {}", t.max_distance),
            format!("tracking.max_angle_deg = {}", t.max_angle_deg),
            format!("tracking.epsilon = {}", t.epsilon),
            format!("render.epsilon = {}", self.render.epsilon),
            format!("render.sh_degree = {}", self.render.sh_degree),
            format!("render.alpha_cutoff = {}", self.render.alpha_cutoff),
            format!("render.near = {}", self.render.near),
            format!("lifecycle.color_threshold = {}", l.color_threshold),
            format!("lifecycle.weight_threshold = {}", l.weight_threshold),
            format!("lifecycle.sample_fraction = {}", l.sample_fraction),
            format!("lifecycle.keyframe_angle_deg = {}", l.keyframe_angle_deg),
            format!("lifecycle.keyframe_translation = {}", l.keyframe_translation),
            format!("lifecycle.n_global = {}", l.n_global),
            format!("lifecycle.n_local = {}", l.n_local),
            format!("lifecycle.min_opacity = {}", l.min_opacity),
            format!("lifecycle.max_scale = {}", l.max_scale),
            format!("lifecycle.min_scale = {}", l.min_scale),
            format!("lifecycle.initial_opacity = {}", l.initial_opacity),
            format!("lifecycle.max_init_scale = {}", l.max_init_scale),
            format!("lifecycle.fallback_scale = {}", l.fallback_scale),
            format!("optimizer.lr_position = {}", o.position),
            format!("optimizer.lr_sh0 = {}", o.sh0),
            format!("optimizer.lr_sh_rest = {}", o.sh_rest),
            format!("optimizer.lr_opacity = {}", o.opacity),
            format!("optimizer.lr_scale = {}", o.scale),
            format!("optimizer.lr_rotation = {}", o.rotation),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
