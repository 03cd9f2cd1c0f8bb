//! The `relbev` command line: scene simulation, encoding, evaluation,
//! gradient checks, toy training and fusion-weight dumps.
//!
//! Every command takes `--config`, `--seed` and `--out`. All randomness
//! derives from the seed through named streams, so identical invocations
//! write identical files; the wall-clock time only appears in `meta.json`.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod pgm;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Corrupt, GridPreset, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<relbev_core::Error> for CliError {
    fn from(e: relbev_core::Error) -> Self {
        match e {
            relbev_core::Error::NonFinite(_) => Self::numeric(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "relbev", version, about = "Multi-camera to bird's-eye-view fusion on synthetic roadside scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene and write it as a bundle.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        grid: Option<GridPreset>,
    },
    /// Run the model on a bundle: BEV features, fusion weights, detections.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Parameter file; fresh seeded weights when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum)]
        corrupt: Option<Corrupt>,
    },
    /// Score detections against bundle ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Detections JSON from `encode`, one frame or a list of frames.
        #[arg(long)]
        detections: PathBuf,
        /// One bundle per frame, in order.
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
    },
    /// Compare model gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Elements checked per parameter tensor.
        #[arg(long, default_value_t = 8)]
        max_elems: usize,
    },
    /// Train on a fixed scene and write the loss curve.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        grid: Option<GridPreset>,
    },
    /// Write per-camera fusion weights as PGM heatmaps.
    WeightsDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum)]
        corrupt: Option<Corrupt>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RBEV_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::usage(format!("RBEV_THREADS={v} is not a positive integer")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr, summaries to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|_| commands::dispatch(&cli.command)) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("relbev: {e}");
            e.code
        }
    }
}
