use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;

use gps_core::io;

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Scene description file.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame count; overrides the scene's trajectory length.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Seed of the depth noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn execute(a: &SynthArgs) -> anyhow::Result<()> {
    if a.frames == Some(0) {
        bail!("--frames must be at least 1");
    }
    let text = fs::read_to_string(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let desc = io::parse_scene(&text).with_context(|| format!("in {}", a.scene.display()))?;
    let scene = desc.build(a.frames);
    if scene.trajectory.is_empty() {
        bail!("scene trajectory has no frames");
    }
    let frames = scene.frames(a.seed).collect::<Result<Vec<_>, _>>()?;
    io::write_tum(&a.out, &frames, &scene.trajectory, io::tum::DEFAULT_DEPTH_SCALE)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}
