use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::AsmModel;
use crate::data::{SeriesFrame, WindowSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Empirical q-quantile with linear interpolation.
    Quantile(f64),
    /// `mean + k·std` (population std).
    MeanPlusKSigma(f64),
    Fixed(#[serde(with = "crate::util::f64_or_inf")] f64),
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::usage(format!("quantile {q} outside [0, 1]")))
            }
            ThresholdPolicy::MeanPlusKSigma(k) if !k.is_finite() => Err(Error::usage("k must be finite")),
            ThresholdPolicy::Fixed(e) if e.is_nan() => Err(Error::usage("fixed threshold is NaN")),
            _ => Ok(()),
        }
    }
}

pub fn fit_threshold(errors: &[f64], policy: ThresholdPolicy) -> Result<f64> {
    policy.validate()?;
    if errors.is_empty() {
        return Err(Error::usage("cannot fit a threshold to zero errors"));
    }
    Ok(match policy {
        ThresholdPolicy::Quantile(q) => {
            let mut s = errors.to_vec();
            s.sort_by(f64::total_cmp);
            let pos = q * (s.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        }
        ThresholdPolicy::MeanPlusKSigma(k) => {
            let n = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / n;
            let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            mean + k * var.sqrt()
        }
        ThresholdPolicy::Fixed(e) => e,
    })
}

/// Per-window scores and flags over a frame, plus per-point flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    /// Reconstruction error of the window starting at each position.
    pub errors: Vec<f64>,
    pub threshold: f64,
    /// `flags[i] == (errors[i] > threshold)`.
    pub flags: Vec<bool>,
    /// A point is flagged when any window covering it is.
    pub point_flags: Vec<bool>,
    pub window_len: usize,
    /// Frame rows covered by the scored windows.
    pub evaluated_range: Range<usize>,
}

impl AnomalyReport {
    /// Builds a report from window errors over `total` points.
    pub fn from_errors(errors: Vec<f64>, threshold: f64, window_len: usize, total: usize) -> Self {
        let flags: Vec<bool> = errors.iter().map(|&e| e > threshold).collect();
        let mut point_flags = vec![false; total];
        let mut cover_until = 0;
        for (p, pf) in point_flags.iter_mut().enumerate() {
            if flags.get(p).copied().unwrap_or(false) {
                cover_until = cover_until.max(p + window_len);
            }
            *pf = p < cover_until;
        }
        AnomalyReport {
            errors,
            threshold,
            flags,
            point_flags,
            window_len,
            evaluated_range: 0..total,
        }
    }

    pub fn flagged_points(&self) -> Vec<usize> {
        self.point_flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn flag_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Maximal runs of flagged points as half-open ranges.
    pub fn runs(&self) -> Vec<Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &f) in self.point_flags.iter().enumerate() {
            match (f, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push(s..self.point_flags.len());
        }
        runs
    }
}

/// Flattened stride-1 windows of `window_len` rows.
pub fn sliding_windows(frame: &SeriesFrame, window_len: usize) -> Vec<Vec<f64>> {
    if frame.len() < window_len || window_len == 0 {
        return Vec::new();
    }
    (0..=frame.len() - window_len)
        .map(|s| frame.rows(s..s + window_len).to_vec())
        .collect()
}

/// Scores every stride-1 window of a standardized frame.
pub fn detect_anomalies(frame: &SeriesFrame, model: &AsmModel, threshold: f64) -> Result<AnomalyReport> {
    let w = model.config().window_len;
    if frame.len() < w {
        return Err(Error::usage(format!(
            "frame of {} rows is shorter than the ASM window of {w}",
            frame.len()
        )));
    }
    if frame.n_features() != model.n_features() {
        return Err(Error::usage(format!(
            "frame has {} features, ASM was trained on {}",
            frame.n_features(),
            model.n_features()
        )));
    }
    let errors = model.reconstruction_errors(&sliding_windows(frame, w))?;
    Ok(AnomalyReport::from_errors(errors, threshold, w, frame.len()))
}

/// Training sample for the extreme-condition model.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtremeWindow {
    /// Rows `[a−2n, a)`.
    pub input: Tensor,
    /// Target column over `[a, a+n)`.
    pub target: Vec<f64>,
    pub source_anomaly_index: usize,
}

impl From<ExtremeWindow> for WindowSample {
    fn from(e: ExtremeWindow) -> Self {
        WindowSample {
            input: e.input,
            target: e.target,
            origin_index: e.source_anomaly_index - 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub windows: Vec<ExtremeWindow>,
    /// Anchors dropped because the window left the frame.
    pub skipped: usize,
}

/// First point of each group of runs, where a run starting fewer than `n`
/// steps after the previous one ends joins its group.
pub(crate) fn group_anchors(runs: &[Range<usize>], n: usize) -> Vec<usize> {
    let mut anchors = Vec::new();
    let mut last_end: Option<usize> = None;
    for run in runs {
        match last_end {
            Some(end) if run.start - end < n => {}
            _ => anchors.push(run.start),
        }
        last_end = Some(run.end);
    }
    anchors
}

/// Cuts one `2n`-in / `n`-out window per anomaly run.
///
/// A run starting fewer than `n` steps after the previous run ends joins
/// that run's group; each group is anchored at its first flagged point.
pub fn extract_extreme_windows(frame: &SeriesFrame, report: &AnomalyReport, n: usize) -> Result<Extraction> {
    if n < 1 {
        return Err(Error::usage("extreme window n must be at least 1"));
    }
    if report.point_flags.len() != frame.len() {
        return Err(Error::usage(format!(
            "report covers {} points, frame has {}",
            report.point_flags.len(),
            frame.len()
        )));
    }
    let anchors = group_anchors(&report.runs(), n);
    let target = frame.target();
    let mut out = Extraction {
        windows: Vec::new(),
        skipped: 0,
    };
    for a in anchors {
        if a < 2 * n || a + n > frame.len() {
            out.skipped += 1;
            continue;
        }
        out.windows.push(ExtremeWindow {
            input: Tensor::matrix(2 * n, frame.n_features(), frame.rows(a - 2 * n..a).to_vec()),
            target: target[a..a + n].to_vec(),
            source_anomaly_index: a,
        });
    }
    if out.skipped > 0 {
        log::warn!("skipped {} anomaly runs too close to the series edges", out.skipped);
    }
    Ok(out)
}
