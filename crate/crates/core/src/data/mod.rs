//! Ingestion, standardization, windowing and chronological splits.

mod frame;
mod split;
mod standardize;
mod window;

pub use frame::{format_timestamp, load_csv, CsvSchema, FillPolicy, SeriesFrame, TimestampFormat};
pub use split::{split_chronological, SplitSpec, Splits};
pub use standardize::{
    apply_standardizer, fit_standardizer, invert_standardizer, standardize_values, StandardizationParams,
};
pub use window::{make_windows, window_count, WindowSample, WindowShape};
