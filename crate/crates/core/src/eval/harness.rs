use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{ar_fit, persistence_baseline};
use super::metrics::{MetricSet, Units};
use crate::data::{apply_standardizer, invert_standardizer, make_windows, SeriesFrame, SplitSpec, WindowSample};
use crate::error::{Error, Result, StageExt};
use crate::hybrid::{train_pipeline, HybridModel, PipelineConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: SplitSpec,
    /// Step between consecutive test forecast origins.
    pub stride: usize,
    pub ar_order: usize,
    pub units: Units,
    /// Worker threads for scoring test windows.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: SplitSpec::default(),
            stride: 1,
            ar_order: 24,
            units: Units::Standardized,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hybrid: MetricSet,
    pub persistence: MetricSet,
    pub ar: MetricSet,
    pub ar_order: usize,
    pub windows: usize,
    /// Test windows whose trigger window was flagged.
    pub flagged_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_asm: MetricSet,
    pub without_asm: MetricSet,
    /// Metrics over the test windows the gate flagged; absent when none were.
    pub flagged_with_asm: Option<MetricSet>,
    pub flagged_without_asm: Option<MetricSet>,
    pub windows: usize,
    pub flagged_windows: usize,
    pub extreme_model_trained: bool,
    pub train: TrainReport,
}

fn metric_row(s: &mut String, name: &str, m: &MetricSet) {
    writeln!(s, "{name:<22} {:>12.6} {:>12.6} {:>8}", m.mse, m.mae, m.n).expect("writing to a String");
}

fn metric_header(s: &mut String, units: Units) {
    let units = match units {
        Units::Standardized => "standardized",
        Units::Original => "original",
    };
    writeln!(
        s,
        "{:<22} {:>12} {:>12} {:>8}   ({units} units)",
        "model", "mse", "mae", "n"
    )
    .expect("writing to a String");
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        metric_header(&mut s, self.hybrid.units);
        metric_row(&mut s, "hybrid", &self.hybrid);
        metric_row(&mut s, "persistence", &self.persistence);
        metric_row(&mut s, &format!("ar({})", self.ar_order), &self.ar);
        writeln!(s, "test windows: {}, flagged: {}", self.windows, self.flagged_windows).expect("writing to a String");
        s
    }
}

impl AblationReport {
    /// Paired with/without-ASM table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        metric_header(&mut s, self.with_asm.units);
        metric_row(&mut s, "all / with asm", &self.with_asm);
        metric_row(&mut s, "all / without asm", &self.without_asm);
        if let (Some(w), Some(o)) = (&self.flagged_with_asm, &self.flagged_without_asm) {
            metric_row(&mut s, "flagged / with asm", w);
            metric_row(&mut s, "flagged / without asm", o);
        }
        writeln!(
            s,
            "test windows: {}, flagged: {}, extreme model: {}",
            self.windows,
            self.flagged_windows,
            if self.extreme_model_trained {
                "trained"
            } else {
                "absent"
            }
        )
        .expect("writing to a String");
        s
    }
}

/// Test-split windows of a standardized frame: every target step lies in the
/// test split, inputs may reach back into earlier splits.
pub fn test_windows(
    z: &SeriesFrame,
    test_start: usize,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    let first_origin = test_start.max(1).max(input_len) - 1;
    let start = first_origin + 1 - input_len;
    if z.len() < start + input_len + horizon {
        return Err(Error::usage(format!(
            "test split of {} rows holds no {horizon}-step window",
            z.len().saturating_sub(test_start)
        )));
    }
    let mut w = make_windows(&z.slice(start..z.len()), input_len, horizon, stride)?;
    for s in &mut w {
        s.origin_index += start;
    }
    Ok(w)
}

struct Scored {
    target: Vec<f64>,
    predictions: Vec<Vec<f64>>,
    flagged: bool,
}

fn score(models: &[&HybridModel], windows: &[WindowSample], threads: usize) -> Result<Vec<Scored>> {
    let one = |w: &WindowSample| -> Result<Scored> {
        let mut predictions = Vec::with_capacity(models.len());
        let mut flagged = false;
        for (i, m) in models.iter().enumerate() {
            let d = m.dispatch(&w.input)?;
            if i == 0 {
                flagged = d.triggered;
            }
            predictions.push(d.values);
        }
        Ok(Scored {
            target: w.target.clone(),
            predictions,
            flagged,
        })
    };
    if threads <= 1 {
        return windows.iter().map(one).collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::usage(format!("cannot start {threads} worker threads: {e}")))?
        .install(|| windows.par_iter().map(one).collect())
}

struct Collector<'a> {
    model: &'a HybridModel,
    units: Units,
    y: Vec<f64>,
    y_hat: Vec<f64>,
}

impl<'a> Collector<'a> {
    fn new(model: &'a HybridModel, units: Units) -> Self {
        Collector {
            model,
            units,
            y: Vec::new(),
            y_hat: Vec::new(),
        }
    }

    fn push(&mut self, y: &[f64], y_hat: &[f64]) {
        self.y.extend_from_slice(y);
        self.y_hat.extend_from_slice(y_hat);
    }

    fn finish(self) -> Result<MetricSet> {
        match self.units {
            Units::Standardized => MetricSet::compute(&self.y, &self.y_hat, self.units),
            Units::Original => {
                let t = self.model.normal().target_index();
                let p = self.model.standardizer();
                MetricSet::compute(
                    &invert_standardizer(&self.y, p, t),
                    &invert_standardizer(&self.y_hat, p, t),
                    self.units,
                )
            }
        }
    }
}

fn prepare(model: &HybridModel, frame: &SeriesFrame, opts: &EvalOptions) -> Result<(SeriesFrame, usize, usize)> {
    if frame.n_features() != model.n_features() {
        return Err(Error::usage(format!(
            "data has {} features, model was trained on {}",
            frame.n_features(),
            model.n_features()
        )));
    }
    let [train, val, _] = opts.split.sizes(frame.len())?;
    let z = apply_standardizer(frame, model.standardizer())?;
    Ok((z, train, train + val))
}

/// Test-split metrics of the hybrid against persistence and AR baselines.
///
/// The AR model is fitted on the standardized target of the training split.
pub fn evaluate(model: &HybridModel, frame: &SeriesFrame, opts: &EvalOptions) -> Result<EvalReport> {
    let (z, train_len, test_start) = prepare(model, frame, opts)?;
    let (l, h) = (model.input_len(), model.horizon());
    let windows = test_windows(&z, test_start, l, h, opts.stride)?;
    let target_col = z.target();
    let ar = ar_fit(&target_col[..train_len], opts.ar_order)?;
    let t = model.normal().target_index();
    let scored = score(&[model], &windows, opts.threads)?;
    let mut hybrid = Collector::new(model, opts.units);
    let mut persistence = Collector::new(model, opts.units);
    let mut autoreg = Collector::new(model, opts.units);
    for (w, s) in windows.iter().zip(&scored) {
        let past = w
            .input
            .values()
            .chunks_exact(w.input.last_dim())
            .map(|r| r[t])
            .collect::<Vec<_>>();
        hybrid.push(&s.target, &s.predictions[0]);
        persistence.push(&s.target, &persistence_baseline(&past, h)?);
        autoreg.push(&s.target, &ar.forecast_from(&past, h)?);
    }
    Ok(EvalReport {
        hybrid: hybrid.finish()?,
        persistence: persistence.finish()?,
        ar: autoreg.finish()?,
        ar_order: opts.ar_order,
        windows: windows.len(),
        flagged_windows: scored.iter().filter(|s| s.flagged).count(),
    })
}

/// Trains the hybrid once and compares it with its ASM-disabled variant
/// (ε = ∞, i.e. the plain normal DAT) on the same test windows.
pub fn run_ablation(frame: &SeriesFrame, config: &PipelineConfig, opts: &EvalOptions) -> Result<AblationReport> {
    let opts = EvalOptions {
        split: config.split,
        ..opts.clone()
    };
    let (model, train) = train_pipeline(frame, config)?;
    let disabled = model.with_threshold(f64::INFINITY)?;
    let (z, _, test_start) = prepare(&model, frame, &opts).stage("ablation")?;
    let windows = test_windows(&z, test_start, model.input_len(), model.horizon(), opts.stride).stage("ablation")?;
    let scored = score(&[&model, &disabled], &windows, opts.threads)?;
    let mut all = [Collector::new(&model, opts.units), Collector::new(&model, opts.units)];
    let mut flagged = [Collector::new(&model, opts.units), Collector::new(&model, opts.units)];
    for s in &scored {
        for v in 0..2 {
            all[v].push(&s.target, &s.predictions[v]);
            if s.flagged {
                flagged[v].push(&s.target, &s.predictions[v]);
            }
        }
    }
    let flagged_windows = scored.iter().filter(|s| s.flagged).count();
    let [fw, fo] = flagged;
    let (flagged_with_asm, flagged_without_asm) = if flagged_windows == 0 {
        (None, None)
    } else {
        (Some(fw.finish()?), Some(fo.finish()?))
    };
    let [aw, ao] = all;
    Ok(AblationReport {
        with_asm: aw.finish()?,
        without_asm: ao.finish()?,
        flagged_with_asm,
        flagged_without_asm,
        windows: windows.len(),
        flagged_windows,
        extreme_model_trained: model.extreme().is_some(),
        train,
    })
}
