use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::config::validate_blend;
use crate::asm::{group_anchors, AnomalyReport, AsmModel};
use crate::dat::DatModel;
use crate::data::{invert_standardizer, SeriesFrame, StandardizationParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which model produced a forecast step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Normal,
    Extreme,
    Blend,
}

/// Output of one gate decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    /// `H` standardized predictions.
    pub values: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub triggered: bool,
    /// Reconstruction error of the trailing ASM window.
    pub trigger_error: f64,
    /// Normal-model output before blending.
    pub normal: Vec<f64>,
    pub extreme: Option<AlignedExtreme>,
}

/// Extreme-model output mapped onto future steps `0..values.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedExtreme {
    /// History row where the anomaly group starts.
    pub anchor: usize,
    pub values: Vec<f64>,
}

/// Iterative forecast in standardized units.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockForecast {
    pub values: Vec<f64>,
    pub regimes: Vec<Regime>,
    /// One entry per dispatch.
    pub trigger_errors: Vec<f64>,
    pub triggered: bool,
}

impl BlockForecast {
    pub fn dispatches(&self) -> usize {
        self.trigger_errors.len()
    }
}

/// Forecast in original units with one timestamp per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub timestamps: Vec<String>,
    pub values: Vec<f64>,
    pub regime: Vec<Regime>,
    pub anomaly_triggered: bool,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Reconstruction error of each dispatch's trigger window.
    pub trigger_errors: Vec<f64>,
    #[serde(with = "crate::util::f64_or_inf")]
    pub threshold: f64,
    pub dispatches: usize,
}

/// Normal DAT, optional extreme DAT, and the ASM gate that chooses between them.
#[derive(Debug)]
pub struct HybridModel {
    pub(crate) normal: DatModel,
    pub(crate) extreme: Option<DatModel>,
    pub(crate) extreme_absent_reason: Option<String>,
    pub(crate) asm: AsmModel,
    pub(crate) threshold: f64,
    pub(crate) standardizer: StandardizationParams,
    pub(crate) blend_weight: f64,
    pub(crate) seed: u64,
    dispatch_calls: AtomicUsize,
}

impl Clone for HybridModel {
    fn clone(&self) -> Self {
        HybridModel {
            normal: self.normal.clone(),
            extreme: self.extreme.clone(),
            extreme_absent_reason: self.extreme_absent_reason.clone(),
            asm: self.asm.clone(),
            threshold: self.threshold,
            standardizer: self.standardizer.clone(),
            blend_weight: self.blend_weight,
            seed: self.seed,
            dispatch_calls: AtomicUsize::new(0),
        }
    }
}

impl HybridModel {
    /// Assembles a model from trained parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        normal: DatModel,
        extreme: Option<DatModel>,
        extreme_absent_reason: Option<String>,
        asm: AsmModel,
        threshold: f64,
        standardizer: StandardizationParams,
        blend_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        validate_blend(blend_weight)?;
        if threshold.is_nan() {
            return Err(Error::usage("threshold is NaN"));
        }
        let d = standardizer.n_features();
        let mut feature_counts = vec![normal.n_features(), asm.n_features()];
        if let Some(e) = &extreme {
            feature_counts.push(e.n_features());
            if e.target_index() != normal.target_index() {
                return Err(Error::usage("normal and extreme models disagree on the target column"));
            }
        }
        if feature_counts.iter().any(|&n| n != d) {
            return Err(Error::usage(format!(
                "sub-model feature counts {feature_counts:?} do not match the standardizer's {d}"
            )));
        }
        if asm.config().window_len > normal.config().input_len {
            return Err(Error::usage("ASM window is longer than the DAT input window"));
        }
        Ok(HybridModel {
            normal,
            extreme,
            extreme_absent_reason,
            asm,
            threshold,
            standardizer,
            blend_weight,
            seed,
            dispatch_calls: AtomicUsize::new(0),
        })
    }

    pub fn normal(&self) -> &DatModel {
        &self.normal
    }

    pub fn extreme(&self) -> Option<&DatModel> {
        self.extreme.as_ref()
    }

    /// Why the extreme model is missing, when it is.
    pub fn extreme_absent_reason(&self) -> Option<&str> {
        self.extreme_absent_reason.as_deref()
    }

    pub fn asm(&self) -> &AsmModel {
        &self.asm
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn standardizer(&self) -> &StandardizationParams {
        &self.standardizer
    }

    pub fn blend_weight(&self) -> f64 {
        self.blend_weight
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_len(&self) -> usize {
        self.normal.config().input_len
    }

    pub fn horizon(&self) -> usize {
        self.normal.config().horizon
    }

    pub fn n_features(&self) -> usize {
        self.standardizer.n_features()
    }

    pub fn dispatch_calls(&self) -> usize {
        self.dispatch_calls.load(Ordering::Relaxed)
    }

    /// Same sub-models with a different gate threshold.
    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if threshold.is_nan() {
            return Err(Error::usage("threshold is NaN"));
        }
        Ok(HybridModel {
            threshold,
            ..self.clone()
        })
    }

    pub fn with_blend_weight(&self, blend_weight: f64) -> Result<Self> {
        validate_blend(blend_weight)?;
        Ok(HybridModel {
            blend_weight,
            ..self.clone()
        })
    }

    fn check_history(&self, z: &Tensor) -> Result<()> {
        let (l, d) = z.dims2()?;
        if d != self.n_features() {
            return Err(Error::usage(format!(
                "history has {d} features, model was trained on {}",
                self.n_features()
            )));
        }
        if l != self.input_len() {
            return Err(Error::usage(format!(
                "history has {l} rows, model needs exactly {}",
                self.input_len()
            )));
        }
        Ok(())
    }

    fn asm_windows(&self, z: &Tensor, from: usize) -> Vec<Vec<f64>> {
        let w = self.asm.config().window_len;
        let d = self.n_features();
        (from..=z.rows() - w)
            .map(|s| z.values()[s * d..(s + w) * d].to_vec())
            .collect()
    }

    /// Reconstruction error of the last ASM window of a standardized history.
    pub fn trigger_error(&self, z: &Tensor) -> Result<f64> {
        self.check_history(z)?;
        let last = z.rows() - self.asm.config().window_len;
        Ok(self.asm.reconstruction_errors(&self.asm_windows(z, last))?[0])
    }

    /// Extreme-model predictions aligned to the future steps of a flagged
    /// history.
    ///
    /// The anchor is the first flagged point of the anomaly group that
    /// reaches the end of the history, found the same way extraction finds
    /// training anchors. The extreme model reads the `2n` rows before the
    /// anchor and predicts `n` steps from it; the part of that block beyond
    /// the history is returned. `None` when there is no extreme model or its
    /// block ends inside the history.
    fn aligned_extreme(&self, z: &Tensor, trigger_error: f64) -> Result<Option<AlignedExtreme>> {
        let Some(model) = &self.extreme else {
            return Ok(None);
        };
        let n = model.config().horizon;
        let l = z.rows();
        let mut errors = self.asm.reconstruction_errors(&self.asm_windows(z, 0))?;
        *errors.last_mut().expect("at least one window") = trigger_error;
        let report = AnomalyReport::from_errors(errors, self.threshold, self.asm.config().window_len, l);
        let Some(&anchor) = group_anchors(&report.runs(), n).last() else {
            return Ok(None);
        };
        let offset = l - anchor;
        if offset >= n {
            return Ok(None);
        }
        let out = model.forward(&rows_before(z, anchor, model.config().input_len))?;
        let take = (n - offset).min(self.horizon());
        Ok(Some(AlignedExtreme {
            anchor,
            values: out[offset..offset + take].to_vec(),
        }))
    }

    /// One gated block forecast on a standardized `L×d` history.
    ///
    /// When the trailing ASM window is flagged, the aligned extreme
    /// predictions are blended into the steps they cover; other steps keep
    /// the normal output.
    pub fn dispatch(&self, z: &Tensor) -> Result<Dispatch> {
        self.check_history(z)?;
        self.dispatch_calls.fetch_add(1, Ordering::Relaxed);
        let trigger_error = self.trigger_error(z)?;
        let triggered = trigger_error > self.threshold;
        let normal = self.normal.forward(z)?;
        let mut values = normal.clone();
        let mut regimes = vec![Regime::Normal; values.len()];
        let extreme = if triggered {
            self.aligned_extreme(z, trigger_error)?
        } else {
            None
        };
        if let Some(x) = &extreme {
            let lambda = self.blend_weight;
            let tag = if lambda == 1.0 { Regime::Extreme } else { Regime::Blend };
            for (i, e) in x.values.iter().enumerate() {
                values[i] = lambda * e + (1.0 - lambda) * values[i];
                regimes[i] = tag;
            }
        }
        Ok(Dispatch {
            values,
            regimes,
            triggered,
            trigger_error,
            normal,
            extreme,
        })
    }

    /// Iterative multi-step forecast in standardized units.
    ///
    /// Each block's predictions are appended to the working history with the
    /// last observed exogenous values carried forward.
    pub fn forecast_standardized(&self, z: &Tensor, h_total: usize) -> Result<BlockForecast> {
        if h_total == 0 {
            return Err(Error::usage("forecast horizon must be at least 1"));
        }
        self.check_history(z)?;
        let (l, d) = z.dims2()?;
        let target = self.normal.target_index();
        let mut work = z.values().to_vec();
        let last_row = z.row(l - 1).to_vec();
        let mut out = BlockForecast {
            values: Vec::with_capacity(h_total),
            regimes: Vec::with_capacity(h_total),
            trigger_errors: Vec::new(),
            triggered: false,
        };
        while out.values.len() < h_total {
            let block = self.dispatch(&Tensor::matrix(l, d, work.clone()))?;
            out.triggered |= block.triggered;
            out.trigger_errors.push(block.trigger_error);
            let need = h_total - out.values.len();
            out.values.extend(block.values.iter().take(need));
            out.regimes.extend(block.regimes.iter().take(need));
            if out.values.len() < h_total {
                for &y in &block.values {
                    let mut row = last_row.clone();
                    row[target] = y;
                    work.extend(row);
                }
                work.drain(..work.len() - l * d);
            }
        }
        Ok(out)
    }

    fn standardize_history(&self, history: &SeriesFrame) -> Result<Tensor> {
        if history.n_features() != self.n_features() {
            return Err(Error::usage(format!(
                "history has {} features, model was trained on {}",
                history.n_features(),
                self.n_features()
            )));
        }
        if history.len() != self.input_len() {
            return Err(Error::usage(format!(
                "history has {} rows, model needs exactly {}",
                history.len(),
                self.input_len()
            )));
        }
        let d = self.n_features();
        let mut z = vec![0.0; history.len() * d];
        for (src, dst) in history.values().chunks_exact(d).zip(z.chunks_exact_mut(d)) {
            self.standardizer.apply_row(src, dst);
        }
        Ok(Tensor::matrix(history.len(), d, z))
    }

    /// Iterative `h_total`-step forecast from the last `L` observed rows.
    pub fn forecast_multi_step(&self, history: &SeriesFrame, h_total: usize) -> Result<ForecastResult> {
        let z = self.standardize_history(history)?;
        let f = self.forecast_standardized(&z, h_total)?;
        let values = invert_standardizer(&f.values, &self.standardizer, self.normal.target_index());
        let dispatches = f.dispatches();
        let last = *history.timestamps().last().expect("history is non-empty");
        let timestamps = (1..=h_total as i64)
            .map(|k| history.format_timestamp(last + k * history.cadence()))
            .collect();
        Ok(ForecastResult {
            timestamps,
            values,
            regime: f.regimes,
            anomaly_triggered: f.triggered,
            diagnostics: Diagnostics {
                dispatches,
                trigger_errors: f.trigger_errors,
                threshold: self.threshold,
            },
        })
    }

    pub fn forecast_single_step(&self, history: &SeriesFrame) -> Result<ForecastResult> {
        self.forecast_multi_step(history, 1)
    }
}

/// Rows `[end−len, end)` of `z`, left-padded with copies of row 0 when
/// `end < len`.
fn rows_before(z: &Tensor, end: usize, len: usize) -> Tensor {
    let d = z.last_dim();
    let mut v = Vec::with_capacity(len * d);
    for _ in end..len {
        v.extend_from_slice(z.row(0));
    }
    v.extend_from_slice(&z.values()[end.saturating_sub(len) * d..end * d]);
    Tensor::matrix(len, d, v)
}
