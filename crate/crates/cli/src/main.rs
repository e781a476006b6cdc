//! Command-line front end for the ANC laboratory: pretraining, filter-bank
//! decomposition, dataset generation, CNN training, simulation and method
//! comparison, all driven by one root seed per run.
//!
//! Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage
//! error. Every run writes `run.json` with the fully resolved configuration.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use anclab::engine::Method;

fn parse_method(name: &str) -> Result<Method, String> {
    Method::parse(name).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "anclab",
    about = "Desk-scale active-noise-control laboratory",
    version
)]
struct Cli {
    /// Cap on parallel workers (dataset generation); defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the broadband control filter with FxLMS and save it.
    Pretrain(PretrainArgs),
    /// Split a broadband filter into perfect-reconstruction sub filters.
    Decompose(DecomposeArgs),
    /// Generate and label a sub-band noise dataset.
    Dataset(DatasetArgs),
    /// Train the weight-prediction CNN on a generated dataset.
    Train(TrainArgs),
    /// Run one control method on a noise recording.
    Simulate(SimulateArgs),
    /// Run several methods on the same noise and tabulate the results.
    Compare(CompareArgs),
    /// Export a power spectrogram of a recording as CSV.
    Spectrogram(SpectrogramArgs),
}

/// Windowed-sinc acoustic-path design shared by every stage that needs the
/// plant. Defaults follow the lab convention: both paths pass 20 Hz–7,980 Hz,
/// the secondary path is shorter (less delay) than the primary so the control
/// problem stays causal.
#[derive(Args, Serialize, Clone)]
struct PathArgs {
    /// Acoustic path length in taps (primary and secondary).
    #[arg(long, default_value_t = 255)]
    path_taps: usize,
    /// Primary-path group delay in taps.
    #[arg(long, default_value_t = 64)]
    primary_delay: usize,
    /// Secondary-path group delay in taps.
    #[arg(long, default_value_t = 32)]
    secondary_delay: usize,
    /// Path passband lower edge in Hz.
    #[arg(long, default_value_t = 20.0)]
    band_low: f64,
    /// Path passband upper edge in Hz.
    #[arg(long, default_value_t = 7980.0)]
    band_high: f64,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    /// Reference noise recording (.wav or .f32); synthesized white noise
    /// when omitted.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Length of the synthesized training noise in seconds.
    #[arg(long, default_value_t = 30.0)]
    seconds: f64,
    /// Sample rate for synthesis and raw .f32 input.
    #[arg(long, default_value_t = 16_000)]
    fs: u32,
    /// Control filter length N.
    #[arg(long, default_value_t = 1024)]
    taps: usize,
    /// FxLMS step size.
    #[arg(long, default_value_t = 1e-4)]
    mu: f64,
    /// Training passes over the record.
    #[arg(long, default_value_t = anclab::adaptive::DEFAULT_PRETRAIN_EPOCHS)]
    epochs: usize,
    /// Root seed for synthesized noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    paths: PathArgs,
    /// Output directory (broadband.f32, meta.json, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DecomposeArgs {
    /// Broadband filter coefficients (.f32).
    #[arg(long)]
    filter: PathBuf,
    /// Number of sub bands M.
    #[arg(long, default_value_t = 15)]
    bands: usize,
    /// Output directory (plan.json, band_<m>.f32, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DatasetArgs {
    /// Sub-filter bank directory from `decompose`.
    #[arg(long)]
    bank: PathBuf,
    /// Training tracks (default 2000, or 80000 with --paper-scale).
    #[arg(long)]
    train: Option<usize>,
    /// Validation tracks (default 200, or 2000 with --paper-scale).
    #[arg(long)]
    val: Option<usize>,
    /// Test tracks (default 200, or 2000 with --paper-scale).
    #[arg(long)]
    test: Option<usize>,
    /// Use the full-size splits (80000/2000/2000) instead of desk scale.
    #[arg(long)]
    paper_scale: bool,
    /// Root seed of the dataset's generator tree.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    paths: PathArgs,
    /// Output directory (tracks/, manifest.json, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset manifest from `dataset`.
    #[arg(long)]
    manifest: PathBuf,
    /// Maximum training epochs.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Optimizer learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Mini-batch size.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Weight-initialization and shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop early once validation per-label accuracy reaches this value
    /// (0 trains for the full epoch budget).
    #[arg(long, default_value_t = 0.995)]
    val_target: f64,
    /// Output directory (model.bin, metrics.csv, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

/// Inputs shared by `simulate` and `compare`.
#[derive(Args, Serialize)]
struct ScenarioArgs {
    /// Noise recording (.wav or .f32).
    #[arg(long)]
    noise: PathBuf,
    /// Sample rate of raw .f32 noise input.
    #[arg(long, default_value_t = 16_000)]
    fs: u32,
    /// Sub-filter bank directory.
    #[arg(long)]
    bank: PathBuf,
    /// Trained CNN weights (required for the gfanc method).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Co-processor frame length in seconds.
    #[arg(long, default_value_t = anclab::engine::DEFAULT_FRAME_S)]
    frame_s: f64,
    /// FxLMS baseline step size.
    #[arg(long, default_value_t = 1e-4)]
    mu: f64,
    #[command(flatten)]
    paths: PathArgs,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Control method to run.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output directory (residual.wav, nr.csv, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    /// Comma-separated method list, e.g. gfanc,sfanc,fxlms.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, required = true)]
    methods: Vec<Method>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output directory (compare.csv, <method>_spec.csv, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SpectrogramArgs {
    /// Input recording (.wav or .f32).
    #[arg(long)]
    input: PathBuf,
    /// Sample rate of raw .f32 input.
    #[arg(long, default_value_t = 16_000)]
    fs: u32,
    /// STFT window length in samples.
    #[arg(long, default_value_t = 512)]
    win: usize,
    /// STFT hop in samples.
    #[arg(long, default_value_t = 256)]
    hop: usize,
    /// Output directory (spec.csv, run.json).
    #[arg(long, env = "ANCLAB_OUT")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // A second build_global (e.g. in tests) is harmless; the pool is
        // already running.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let result = match &cli.command {
        Command::Pretrain(args) => commands::pretrain(args, cli.jobs),
        Command::Decompose(args) => commands::decompose_cmd(args, cli.jobs),
        Command::Dataset(args) => commands::dataset(args, cli.jobs),
        Command::Train(args) => commands::train(args, cli.jobs),
        Command::Simulate(args) => commands::simulate_cmd(args, cli.jobs),
        Command::Compare(args) => commands::compare_cmd(args, cli.jobs),
        Command::Spectrogram(args) => commands::spectrogram(args, cli.jobs),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
