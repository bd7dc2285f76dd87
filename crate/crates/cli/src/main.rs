mod commands;
mod config;
mod error;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "p4gs", version, about = "Dynamic Gaussian splatting pipeline")]
pub struct Cli {
    /// TOML configuration for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view scene with ground truth.
    Synth {
        /// Apply per-camera gains and glare.
        #[arg(long)]
        corrupted: bool,
    },
    /// Train one model per segment of a scene.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Train only this segment index.
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Render models along a camera path.
    Render {
        /// Model containers; each frame uses the one whose time range covers it.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// Camera path JSON.
        #[arg(long)]
        path: PathBuf,
        /// Apply the stored per-camera grids where present.
        #[arg(long)]
        photometric: bool,
    },
    /// Train low- and high-budget models and render both along a path.
    Pairgen {
        #[arg(long)]
        scene: PathBuf,
        /// Camera path JSON; defaults to the first held-out camera.
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        segment: usize,
    },
    /// Enhance a frame sequence with temporal stabilization.
    Stabilize {
        /// Directory of RGBA PFM frames, processed in file-name order.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        backend: Backend,
        /// Enhancer program for the subprocess backend.
        #[arg(long)]
        cmd: Option<PathBuf>,
        /// Extra argument passed to the enhancer program (repeatable).
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Score renders against references (PSNR, SSIM, temporal PSNR).
    Eval {
        /// Model containers to render; requires --scene.
        #[arg(long)]
        model: Vec<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Directory of test frames; requires --reference.
        #[arg(long, conflicts_with = "scene")]
        test: Option<PathBuf>,
        #[arg(long, requires = "test")]
        reference: Option<PathBuf>,
        #[arg(long)]
        photometric: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Identity,
    Unsharp,
    Flicker,
    Subprocess,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
