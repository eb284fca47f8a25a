//! Metrics, baselines, the with/without-ASM ablation and the attention
//! scaling benchmark.

mod baseline;
mod harness;
mod metrics;
mod scaling;

pub use baseline::{ar_fit, persistence_baseline, ArFit};
pub use harness::{evaluate, run_ablation, test_windows, AblationReport, EvalOptions, EvalReport};
pub use metrics::{mae, mse, MetricSet, Units};
pub use scaling::{
    bench_attention_scaling, log_log_slope, EncoderVariant, ScalingReport, VariantScaling, MIN_LENGTH, MIN_PROBES,
    MIN_REPEATS,
};
