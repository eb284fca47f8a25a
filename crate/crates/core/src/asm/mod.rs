//! Autoencoder anomaly model: reconstruction scoring, thresholds, and
//! extreme-window extraction.

mod detect;
mod model;

pub(crate) use detect::group_anchors;
pub use detect::{
    detect_anomalies, extract_extreme_windows, fit_threshold, sliding_windows, AnomalyReport, Extraction,
    ExtremeWindow, ThresholdPolicy,
};
pub use model::{
    asm_train, reconstruction_error, AsmBatch, AsmConfig, AsmMeta, AsmModel, AsmTraining, CHECKPOINT_KIND,
};
