use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uvlod::Error;

mod commands;

#[derive(Parser)]
#[command(name = "uvlod", version, about = "Train, render and benchmark continuous-LOD Gaussian head avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data if configured, run both training stages, write a checkpoint.
    Train {
        /// TOML run configuration.
        config: PathBuf,
        /// Only print the final summary.
        #[arg(long)]
        quiet: bool,
    },
    /// Render frames of a dataset (or a neutral face) at one LOD.
    Render(RenderArgs),
    /// Render one frame across many LODs; writes sweep.csv and strip.png.
    Sweep(SweepArgs),
    /// Time resample + decode + render across LODs.
    Bench(BenchArgs),
    /// Write the decoded Gaussians of one frame as a binary PLY.
    ExportGaussians(ExportArgs),
    /// Write a synthetic dataset rendered from the procedural desk head.
    GenerateData(GenerateArgs),
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose expressions and cameras drive the model. Any dataset with
    /// a matching expression dimension works.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frame index; every frame when omitted.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub lod: f64,
    /// Radians about the vertical axis through the head.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    /// Radians about the horizontal axis through the head.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    /// Image size when no dataset is given.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Output PNG for a single frame, or a directory for several.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Comma-separated LODs; 0.0 to 1.0 in steps of 0.05 by default.
    #[arg(long, value_delimiter = ',')]
    pub lods: Option<Vec<f64>>,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Skip the per-LOD PNGs and the strip.
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub lods: Vec<f64>,
    /// Number of frames to render per iteration.
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Render on one thread for lower timing variance.
    #[arg(long)]
    pub serial: bool,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// CSV path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lod: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// UV resolution of the ground-truth Gaussians.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub expr_dim: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, quiet } => commands::train(&config, quiet),
        Command::Render(a) => commands::render(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::ExportGaussians(a) => commands::export(&a),
        Command::GenerateData(a) => commands::generate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
