use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spikecalib::ann::Arch;
use spikecalib::calibration::{AdvancedOrder, PotentialMode};
use spikecalib::{Pipeline, RoundMode, ThresholdMode};

#[derive(Debug, Parser)]
#[command(
    name = "spikecalib",
    version,
    about = "Convert ReLU networks to spiking networks and calibrate them"
)]
pub struct Cli {
    /// Worker threads for batch-parallel work.
    #[arg(long, global = true, env = "SPIKECALIB_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fold batch norm, pick thresholds, convert and calibrate.
    Convert(ConvertArgs),
    /// Top-1 accuracy of the ANN and of one or more converted networks.
    Evaluate(EvaluateArgs),
    /// Per-layer error statistics, firing rates and energy.
    Diagnose(DiagnoseArgs),
    /// Check the weighted local-error bound on random dense networks.
    BoundCheck(BoundCheckArgs),
    /// Train a small fixture network on synthetic or stored data.
    TrainDemo(TrainDemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Model container (`.scm`).
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration dataset (`.sct`); labels are ignored.
    #[arg(long)]
    pub calib: PathBuf,
    /// Sidecar to write (`.scs`).
    #[arg(long, short)]
    pub output: PathBuf,
    /// Model container written when weights change (defaults to the
    /// sidecar path with a `.scm` extension).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Calibration log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, short = 't')]
    pub time_steps: usize,
    #[arg(long, default_value = "mmse-channel", value_parser = parse::<ThresholdMode>)]
    pub threshold_mode: ThresholdMode,
    /// Grid points of the MMSE search.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    #[arg(long, default_value_t = 99.99)]
    pub percentile: f64,
    #[arg(long, default_value = "round", value_parser = parse::<RoundMode>)]
    pub round_mode: RoundMode,
    #[arg(long, default_value = "none", value_parser = parse::<Pipeline>)]
    pub pipeline: Pipeline,
    /// Samples used to measure bias/potential corrections.
    #[arg(long, default_value_t = 128)]
    pub bias_samples: usize,
    /// Samples used for thresholds and weight calibration.
    #[arg(long, default_value_t = 1024)]
    pub weight_samples: usize,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Weight-calibration mini-batch; 0 for full batch.
    #[arg(long, default_value_t = 32)]
    pub wc_batch: usize,
    #[arg(long, default_value = "elementwise", value_parser = parse::<PotentialMode>)]
    pub potential_mode: PotentialMode,
    #[arg(long, default_value = "weights-then-potential", value_parser = parse::<AdvancedOrder>)]
    pub order: AdvancedOrder,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model containers; each sidecar is matched to the model it was made for.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Labelled dataset (`.sct`).
    #[arg(long)]
    pub data: PathBuf,
    /// Sidecars to evaluate, one per time-step count.
    #[arg(long)]
    pub sidecar: Vec<PathBuf>,
    /// Expected time-step counts, in order; each needs a matching sidecar.
    #[arg(long, value_delimiter = ',')]
    pub time_steps: Vec<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub sidecar: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    pub add_energy: f64,
    #[arg(long, default_value_t = 4.6)]
    pub mult_energy: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundCheckArgs {
    /// Largest layer width.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Largest number of layers.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "round", value_parser = parse::<RoundMode>)]
    pub round_mode: RoundMode,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    Digits,
    Blobs,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    #[arg(long, value_parser = parse::<Arch>)]
    pub arch: Arch,
    /// Synthetic dataset to generate when `--train` is not given.
    #[arg(long, value_enum, default_value_t = Synthetic::Digits)]
    pub dataset: Synthetic,
    /// Stored training set (`.sct`) instead of a synthetic one.
    #[arg(long, requires = "val")]
    pub train: Option<PathBuf>,
    /// Stored validation set (`.sct`).
    #[arg(long, requires = "train")]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 8000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 2000)]
    pub val_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model container to write.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Also write the generated training set here.
    #[arg(long)]
    pub save_train: Option<PathBuf>,
    /// Also write the generated validation set here.
    #[arg(long)]
    pub save_val: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = spikecalib::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: spikecalib::Error| e.to_string())
}
