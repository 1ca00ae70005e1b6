//! Command-line front end: file formats and the fit, forecast, synth and
//! eval workflow.

pub mod commands;
pub mod config;
pub mod flo;
pub mod manifest;
pub mod raster_io;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lamoco_core::forecast::Model;

#[derive(Debug, Parser)]
#[command(name = "lamoco", version, about = "Layered motion decomposition and future frame synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose a clip from its flows and segmentations into a manifest.
    Fit(FitArgs),
    /// Write the composited flow between two steps of a manifest.
    Flow(FlowArgs),
    /// Extend a manifest's trajectories into the future.
    Forecast(ForecastArgs),
    /// Render the predicted frames of a manifest.
    Synth(SynthArgs),
    /// Score a manifest and synthesized frames against a generated clip.
    Eval(EvalArgs),
    /// Generate a synthetic clip with exact ground truth.
    Gen(GenArgs),
    /// Render .flo files as color images.
    RenderFlow(RenderFlowArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Directory of flow_NNNN.flo files (backward flow of each frame).
    #[arg(long)]
    pub flows: PathBuf,
    /// Directory of seg_NNNN.png class-index maps and classes.json.
    #[arg(long)]
    pub segs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of observed frames to use (default: all segmentation maps).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, value_parser = config::parse_grid)]
    pub grid_obj: Option<(usize, usize)>,
    #[arg(long, value_parser = config::parse_grid)]
    pub grid_bg: Option<(usize, usize)>,
    #[arg(long)]
    pub tau_m: Option<f64>,
    #[arg(long)]
    pub lambda_o: Option<f64>,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub t1: usize,
    #[arg(long)]
    pub t2: usize,
    /// Output resolution as HEIGHTxWIDTH (default: the manifest's).
    #[arg(long, value_parser = config::parse_grid)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of future steps.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value = "linear")]
    pub model: Model,
    /// Standard deviation of the jitter added to predicted points.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Number of jittered samples; more than one writes OUT_NNN.json files.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Manifest with predicted steps.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of observed frame_NNNN.png files.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fill each future frame independently.
    #[arg(long)]
    pub no_propagate: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Clip directory written by `gen`.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of synthesized frames.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Metrics file (JSON); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene description (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in scene: `canonical` or `static`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderFlowArgs {
    /// A .flo file or a directory of them.
    #[arg(long)]
    pub flow: PathBuf,
    /// Output PNG, or a directory when the input is one.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Flow(a) => commands::flow(&a),
        Command::Forecast(a) => commands::forecast(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gen(a) => commands::gen(&a),
        Command::RenderFlow(a) => commands::render_flow(&a),
    }
}

/// Caps the worker pool at `LAMOCO_THREADS` when set.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LAMOCO_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("LAMOCO_THREADS must be a positive integer, got '{v}'"))?;
        anyhow::ensure!(n > 0, "LAMOCO_THREADS must be positive");
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
