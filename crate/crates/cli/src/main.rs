//! `roireg` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "roireg", about = "ROI-decomposed deformable registration of 3D volumes")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom pair with ground truth.
    Synth(SynthArgs),
    /// Fit the joint intensity mixture and write labels and ROI volumes.
    Segment(SegmentArgs),
    /// Choose the number of intensity classes.
    Kscan(KscanArgs),
    /// Register a moving volume to a fixed volume.
    Register(RegisterArgs),
    /// Apply a displacement field to a volume or label map.
    Warp(WarpArgs),
    /// Compare two label maps and summarize a field.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom spec JSON; flags override its entries.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Region count; resets the intensity means to an even spacing.
    #[arg(long)]
    pub k: Option<usize>,
    /// Cube edge length in voxels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub warp_amplitude: Option<f64>,
    #[arg(long)]
    pub warp_modes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GmmFlags {
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Normalized intensities at or below this value are left out of the fit.
    #[arg(long)]
    pub background_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[command(flatten)]
    pub gmm: GmmFlags,
}

#[derive(Debug, Args)]
pub struct KscanArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 5)]
    pub k_max: usize,
    /// Moving and fixed label maps used to score candidates by overlap.
    #[arg(long, num_args = 2, value_names = ["MOVING", "FIXED"])]
    pub holdout_labels: Option<Vec<PathBuf>>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub gmm: GmmFlags,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Registration config JSON (the `config` object of result.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "auto_k")]
    pub k: Option<usize>,
    /// Choose k automatically within [--k-min, --k-max].
    #[arg(long)]
    pub auto_k: bool,
    #[arg(long, requires = "auto_k")]
    pub k_min: Option<usize>,
    #[arg(long, requires = "auto_k")]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub window_radius: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per level, coarsest first.
    #[arg(long, value_delimiter = ',')]
    pub iters: Option<Vec<usize>>,
    /// Step sizes per level, coarsest first.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<f64>>,
    #[arg(long)]
    pub diffeomorphic: bool,
    #[arg(long)]
    pub ss_steps: Option<u32>,
    #[arg(long)]
    pub refine_iters: Option<usize>,
    #[arg(long)]
    pub fusion_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Moving label map, warped and scored when --fixed-labels is also given.
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    #[command(flatten)]
    pub gmm: GmmFlags,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// Scalar volume (trilinear) or label map (nearest neighbour).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Label map to score, typically warped moving labels.
    #[arg(long)]
    pub labels: PathBuf,
    /// Reference label map.
    #[arg(long)]
    pub reference: PathBuf,
    /// Displacement field for folding and SDlogJ.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn version_line() -> String {
    format!(
        "{} (vjson format {})",
        env!("CARGO_PKG_VERSION"),
        roireg::io::FORMAT_VERSION
    )
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string())),
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(()),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Segment(a) => commands::segment(&a),
        Command::Kscan(a) => commands::kscan(&a),
        Command::Register(a) => commands::register(&a),
        Command::Warp(a) => commands::warp(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
    }
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(version_line().into_boxed_str());
    let matches = match Cli::command().version(version).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
