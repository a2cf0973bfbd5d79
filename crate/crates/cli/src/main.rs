//! `gdq`: entropy statistics, threshold calibration, quantized inference,
//! sweeps and report summaries.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use granular_dq::entropy::Interpretation;
use granular_dq::e2b::AtcSelect;
use granular_dq::BitCode;

/// Exit status of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    /// A model, threshold, stats or input file is missing or unreadable.
    pub fn artifact(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn inference(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<granular_dq::Error> for Failure {
    fn from(e: granular_dq::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "gdq", version, about = "Patch-wise dynamic quantization for SR inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create seeded SR and controller model files.
    Init(InitArgs),
    /// Entropy statistics over a directory of images.
    Stats(StatsArgs),
    /// Calibrate entropy thresholds from a stats file.
    Calibrate(CalibrateArgs),
    /// Run patch-wise quantized inference on one image.
    Infer(InferArgs),
    /// Evaluate a grid of bit configurations over a corpus.
    Sweep(SweepArgs),
    /// Summarize one or more run reports.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct EntropyArgs {
    /// Number of KDE bins.
    #[arg(long, default_value_t = 256)]
    pub bins: usize,
    /// Kernel bandwidth; defaults to 1/bins.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `bin` (bin-wise masses) or `pixel` (pixel-wise average).
    #[arg(long, default_value = "bin")]
    pub entropy_mode: Interpretation,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub gbc: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    #[arg(long, default_value_t = 16)]
    pub feat_channels: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    /// Controller candidate bits.
    #[arg(long, default_value = "4,6,8")]
    pub bits: String,
    /// Gumbel-softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Directory of PNG/PPM/PGM images.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram CSV of the entropy distribution.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub hist_bins: usize,
    #[arg(long, default_value_t = 96)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    #[command(flatten)]
    pub entropy: EntropyArgs,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Initial threshold fractions.
    #[arg(long, default_value = "0.5,0.9")]
    pub thresholds: String,
    /// Bit code per entropy interval (one more than thresholds).
    #[arg(long, default_value = "4,5,8")]
    pub bit_codes: String,
    #[arg(long, default_value_t = 0.9997)]
    pub gamma: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// `per-patch-sequential` or `batch-mean`.
    #[arg(long, default_value = "per-patch-sequential")]
    pub atc_select: AtcSelect,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the per-iteration threshold trajectory as CSV on stdout.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub gbc: Option<PathBuf>,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// High-resolution reference; without it metrics compare against the
    /// full-precision output.
    #[arg(long)]
    pub hr: Option<PathBuf>,
    /// Run every patch at this bit, bypassing controller and refinement.
    #[arg(long)]
    pub force_bit: Option<BitCode>,
    /// Argmax gating instead of Gumbel sampling.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    /// Include wall-clock runtime in the report.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub entropy: EntropyArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub gbc: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bit-code configurations separated by `;`, e.g. `4,5,8;4,6,8`.
    #[arg(long, default_value = "4,5,8")]
    pub grid: String,
    /// Threshold sets separated by `;`, e.g. `0.5,0.9;0.3,0.6,0.9`.
    #[arg(long, default_value = "0.5,0.9")]
    pub threshold_grid: String,
    #[arg(long, default_value_t = 0.9997)]
    pub gamma: f64,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub patch_size: usize,
    #[command(flatten)]
    pub entropy: EntropyArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run report JSON files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the summary table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("GDQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::usage(format!("GDQ_THREADS={v:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Init(a) => commands::init(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gdq: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
