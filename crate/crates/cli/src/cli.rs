use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Day-ahead electricity price forecasting with an anomaly-gated hybrid transformer.
///
/// Flags override values from `--config`, which override built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "voltcast", version)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed for data generation and training
    #[arg(long, global = true, value_name = "U64", default_value_t = 0)]
    pub seed: u64,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "voltcast-out")]
    pub out: PathBuf,

    /// Print nothing but errors
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic price corpus with a ground-truth event sidecar
    Synth(SynthArgs),
    /// Train the normal model, the anomaly detector and the extreme model
    Train(TrainArgs),
    /// Score a series with a trained detector and flag anomalous windows
    Detect(DetectArgs),
    /// Forecast from the most recent input window of a history file
    Forecast(ForecastArgs),
    /// Compare a trained model with persistence and AR baselines on the test split
    Eval(EvalArgs),
    /// Train once and compare the model with and without the anomaly gate
    Ablate(AblateArgs),
    /// Measure encoder time and memory scaling for full and distilled attention
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Seasonal,
    Spiky,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// One step
    Single,
    /// Repeated blocks until the horizon is covered
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UnitsArg {
    Standardized,
    Original,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Input CSV (`timestamp,feature...`); the configured synthetic corpus when absent
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Checkpoint directory [default: <out>/checkpoint]
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus family
    #[arg(long, value_enum, default_value_t = KindArg::Seasonal)]
    pub kind: KindArg,
    /// Number of hourly steps (at least 500)
    #[arg(long, value_name = "T", default_value_t = 8760)]
    pub length: usize,
    /// Injected events for spiky and negative corpora
    #[arg(long, value_name = "K", default_value_t = 10)]
    pub events: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Epoch cap for both transformers
    #[arg(long, value_name = "N", default_value_t = 100)]
    pub epochs: usize,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[command(flatten)]
    pub data: DataArg,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// History CSV; its last input-length rows seed the forecast [default: --data source]
    #[arg(long, value_name = "CSV")]
    pub history: Option<PathBuf>,
    /// Steps to forecast in iterative mode
    #[arg(long, value_name = "STEPS", default_value_t = 24)]
    pub horizon: usize,
    /// Forecast mode
    #[arg(long, value_enum, default_value_t = ModeArg::Iterative)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub data: DataArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub scoring: ScoringArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub scoring: ScoringArgs,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Step between test forecast origins
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub stride: usize,
    /// Order of the AR baseline
    #[arg(long, value_name = "P", default_value_t = 24)]
    pub ar_order: usize,
    /// Units the metrics are reported in
    #[arg(long, value_enum, default_value_t = UnitsArg::Standardized)]
    pub units: UnitsArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Probed input lengths, strictly increasing
    #[arg(
        long,
        value_name = "L,...",
        value_delimiter = ',',
        default_value = "128,256,512,1024"
    )]
    pub lengths: Vec<usize>,
    /// Model width of the benchmarked encoders
    #[arg(long, value_name = "D", default_value_t = 8)]
    pub d_model: usize,
    /// Timed passes per probe
    #[arg(long, value_name = "N", default_value_t = 9)]
    pub repeats: usize,
}
