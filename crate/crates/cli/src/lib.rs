//! Command-line front end: `run`, `synth`, `eval` and `render`.

use std::ffi::OsString;

use clap::{Parser, Subcommand};
use gps_core::pipeline::PipelineError;

pub mod evaluate;
pub mod render;
pub mod run;
pub mod synth;

pub use run::{RunArgs, RunOutput, ViewScore};

/// Exit status for configuration, dataset and usage errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when tracking is lost and the run aborts.
pub const EXIT_TRACKING_LOST: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gps", version, about = "Gaussian-plus-SDF RGB-D reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconstruct a TUM-layout dataset or a synthetic scene description.
    Run(run::RunArgs),
    /// Write a synthetic scene out as a TUM-layout dataset.
    Synth(synth::SynthArgs),
    /// Compare a reconstruction with ground truth and print the metrics.
    Eval(evaluate::EvalArgs),
    /// Render a stored reconstruction from an arbitrary pose.
    Render(render::RenderArgs),
}

/// Caps the worker pool at `GPS_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("GPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow::anyhow!("GPS_THREADS must be a positive integer, got `{v}`"))?;
    // A pool that already exists (tests calling in twice) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Tracking { .. }) => EXIT_TRACKING_LOST,
        _ => EXIT_ERROR,
    }
}

pub fn execute(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run(a) => {
            let out = run::execute(a)?;
            println!("{}", out.summary());
            Ok(())
        }
        Command::Synth(a) => synth::execute(a),
        Command::Eval(a) => {
            print!("{}", evaluate::execute(a)?.to_text());
            Ok(())
        }
        Command::Render(a) => render::execute(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return EXIT_ERROR;
    }
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
