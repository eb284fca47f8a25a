use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, MIN_EXTREME_WINDOWS};
use super::model::HybridModel;
use crate::asm::{asm_train, detect_anomalies, extract_extreme_windows, fit_threshold, sliding_windows};
use crate::dat::DatModel;
use crate::data::{apply_standardizer, fit_standardizer, make_windows, split_chronological, SeriesFrame, WindowSample};
use crate::error::{Result, StageExt};
use crate::training::{derive_seed, fit, TrainHistory, TrainOptions};

/// Record of one `train_pipeline` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: PipelineConfig,
    pub normal: TrainHistory,
    pub asm: TrainHistory,
    pub extreme: Option<TrainHistory>,
    pub extreme_absent_reason: Option<String>,
    #[serde(with = "crate::util::f64_or_inf")]
    pub threshold: f64,
    /// Flagged window positions in the training split.
    pub training_flags: usize,
    pub extreme_windows: usize,
    /// Anomaly runs dropped at the split edges.
    pub extreme_skipped: usize,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// The report with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

fn seeded(opts: &TrainOptions, seed: u64) -> TrainOptions {
    TrainOptions { seed, ..opts.clone() }
}

/// Standardize, train the normal DAT and the ASM, fit ε, extract extreme
/// windows from the training split and train the extreme DAT on them.
///
/// Errors name the stage that failed.
pub fn train_pipeline(frame: &SeriesFrame, config: &PipelineConfig) -> Result<(HybridModel, TrainReport)> {
    let started = Instant::now();
    let d = frame.n_features();
    config.validate(d).stage("config")?;
    let seed = config.seed;

    let splits = split_chronological(frame, &config.split).stage("split")?;
    let standardizer = fit_standardizer(frame, 0..splits.train.len()).stage("standardize")?;
    let train = apply_standardizer(&splits.train, &standardizer).stage("standardize")?;
    let val = apply_standardizer(&splits.val, &standardizer).stage("standardize")?;

    let (l, h) = (config.dat.input_len, config.dat.horizon);
    let train_windows = make_windows(&train, l, h, config.window_stride).stage("normal-dat")?;
    let val_windows = if val.is_empty() {
        Vec::new()
    } else {
        make_windows(&val, l, h, config.window_stride).stage("normal-dat")?
    };
    let mut normal =
        DatModel::new(config.dat.clone(), d, frame.target_index(), derive_seed(seed, 1, 0)).stage("normal-dat")?;
    let normal_history = fit(
        &mut normal,
        &train_windows,
        &val_windows,
        &seeded(&config.dat_training, derive_seed(seed, 1, 1)),
    )
    .stage("normal-dat")?;

    let w = config.asm.window_len;
    let asm_out = asm_train(
        &sliding_windows(&train, w),
        &config.asm,
        d,
        &seeded(&config.asm_training, derive_seed(seed, 2, 0)),
    )
    .stage("asm")?;
    let threshold = fit_threshold(&asm_out.training_errors, config.asm.threshold).stage("threshold")?;

    let report = detect_anomalies(&train, &asm_out.model, threshold).stage("detect")?;
    let extraction = extract_extreme_windows(&train, &report, config.asm.extreme_n).stage("extract")?;
    let n_windows = extraction.windows.len();
    let (extreme, extreme_history, reason) = if n_windows == 0 {
        (None, None, Some("no extreme windows".to_string()))
    } else if n_windows < MIN_EXTREME_WINDOWS {
        (
            None,
            None,
            Some(format!(
                "only {n_windows} extreme windows, need at least {MIN_EXTREME_WINDOWS}"
            )),
        )
    } else {
        let samples: Vec<WindowSample> = extraction.windows.into_iter().map(Into::into).collect();
        let mut m = DatModel::new(config.extreme_dat(), d, frame.target_index(), derive_seed(seed, 3, 0))
            .stage("extreme-dat")?;
        let hist = fit(
            &mut m,
            &samples,
            &[],
            &seeded(&config.dat_training, derive_seed(seed, 3, 1)),
        )
        .stage("extreme-dat")?;
        (Some(m), Some(hist), None)
    };
    if let Some(r) = &reason {
        log::info!("extreme model not trained: {r}");
    }

    let model = HybridModel::from_parts(
        normal,
        extreme,
        reason.clone(),
        asm_out.model,
        threshold,
        standardizer,
        config.blend_weight,
        seed,
    )
    .stage("assemble")?;
    let report = TrainReport {
        seed,
        config: config.clone(),
        normal: normal_history,
        asm: asm_out.history,
        extreme: extreme_history,
        extreme_absent_reason: reason,
        threshold,
        training_flags: report.flag_count(),
        extreme_windows: n_windows,
        extreme_skipped: extraction.skipped,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
