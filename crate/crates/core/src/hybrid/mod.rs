//! Anomaly-gated hybrid forecaster: a normal DAT, an extreme-condition DAT,
//! and the ASM that decides when to blend them.

mod config;
mod model;
mod persist;
mod pipeline;

pub use config::{PipelineConfig, MIN_EXTREME_WINDOWS};
pub use model::{AlignedExtreme, BlockForecast, Diagnostics, Dispatch, ForecastResult, HybridModel, Regime};
pub use persist::{Manifest, MANIFEST_FILE, MANIFEST_VERSION};
pub use pipeline::{train_pipeline, TrainReport};
