//! `bevtraj`: synthesize or ingest recordings, cut windows, train, evaluate
//! and report.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bevtraj::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "bevtraj", version, about = "Bird's-eye-view trajectory prediction pipeline")]
struct Cli {
    /// Flat `key = value` configuration file, applied over the defaults and
    /// under command-line flags. Run manifests are valid config files.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic highway recording.
    Synth(SynthArgs),
    /// Validate a HighD recording and keep the positive-x direction.
    Ingest(IngestArgs),
    /// Rasterize recordings into split windows.
    Windows(WindowsArgs),
    /// Train the model on the train split.
    Train(TrainArgs),
    /// Per-horizon RMSE of the model and baselines.
    Eval(EvalArgs),
    /// Print the predicted Gaussian sequence for one window.
    Predict(PredictArgs),
    /// RMSE table, RMSE-vs-horizon chart and overlay figures.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    lanes: Option<usize>,
    /// Seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    speed_min: Option<f64>,
    #[arg(long)]
    speed_max: Option<f64>,
    #[arg(long)]
    lane_change_probability: Option<f64>,
    /// Output directory (default `<data root>/synth`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// HighD `XX_tracks.csv`.
    #[arg(long)]
    tracks: PathBuf,
    /// HighD `XX_recordingMeta.csv`.
    #[arg(long)]
    meta: PathBuf,
    /// Output directory (default `<data root>/ingest`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WindowsArgs {
    /// Recording directory (repeatable); ids of later recordings are offset
    /// by multiples of 1e6.
    #[arg(long = "in", required = true, value_name = "DIR")]
    inputs: Vec<PathBuf>,
    /// Output root (default `<first input>/windows`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stride: Option<i64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Keep at most this many target vehicles per recording.
    #[arg(long)]
    max_targets: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Window root (default: data root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (default `<data>/model`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// `absolute` or `cumulative`.
    #[arg(long)]
    mean_head: Option<String>,
    /// Continue from a checkpoint for `--epochs` more epochs.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file or training output directory; `none` for baselines only.
    #[arg(long, default_value = "none")]
    checkpoint: String,
    /// Comma-separated subset of `cv,cp`, or `none`.
    #[arg(long)]
    baselines: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory (default `<data>/eval`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A window directory written by `windows`.
    #[arg(long)]
    window: PathBuf,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    checkpoint: String,
    #[arg(long)]
    baselines: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Number of overlay figures.
    #[arg(long)]
    overlays: Option<usize>,
    /// Leave out the published reference rows.
    #[arg(long)]
    no_reference: bool,
    /// Output directory (default `<data>/report`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
