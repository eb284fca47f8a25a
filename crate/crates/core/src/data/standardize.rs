use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::error::{Error, Result};

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl StandardizationParams {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numbers serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: StandardizationParams =
            serde_json::from_str(s).map_err(|e| Error::format(format!("standardizer: {e}")))?;
        if p.mean.len() != p.std.len()
            || p.mean.len() != p.feature_names.len()
            || p.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::format("standardizer vectors inconsistent"));
        }
        Ok(p)
    }

    /// `(x − μ)/σ` for one row.
    pub fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = (row[j] - self.mean[j]) / self.std[j];
        }
    }
}

/// Fits per-feature statistics on `train_range` only.
///
/// Constant features get `σ = 1`, so standardizing them only centers.
pub fn fit_standardizer(frame: &SeriesFrame, train_range: Range<usize>) -> Result<StandardizationParams> {
    if train_range.is_empty() || train_range.end > frame.len() {
        return Err(Error::usage(format!(
            "standardizer needs a non-empty range within 0..{}, got {train_range:?}",
            frame.len()
        )));
    }
    let d = frame.n_features();
    let n = train_range.len() as f64;
    let rows = frame.rows(train_range);
    let mut mean = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let std = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let s = (v / n).sqrt();
            // Relative floor: rounding residue on a constant column is not variance.
            if s <= 1e-12 * m.abs().max(1.0) {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(StandardizationParams {
        mean,
        std,
        feature_names: frame.feature_names().to_vec(),
    })
}

pub fn apply_standardizer(frame: &SeriesFrame, params: &StandardizationParams) -> Result<SeriesFrame> {
    let d = frame.n_features();
    if params.n_features() != d {
        return Err(Error::usage(format!(
            "standardizer has {} features, frame has {d}",
            params.n_features()
        )));
    }
    let mut out = vec![0.0; frame.values().len()];
    for (src, dst) in frame.values().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        params.apply_row(src, dst);
    }
    frame.with_values(out)
}

/// `y = z·σ + μ` for one feature.
pub fn invert_standardizer(values: &[f64], params: &StandardizationParams, feature_index: usize) -> Vec<f64> {
    let (m, s) = (params.mean[feature_index], params.std[feature_index]);
    values.iter().map(|z| z * s + m).collect()
}

/// Standardizes raw target values of one feature.
pub fn standardize_values(values: &[f64], params: &StandardizationParams, feature_index: usize) -> Vec<f64> {
    let (m, s) = (params.mean[feature_index], params.std[feature_index]);
    values.iter().map(|x| (x - m) / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(cols: &[Vec<f64>]) -> SeriesFrame {
        let names: Vec<String> = (0..cols.len()).map(|i| format!("f{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        SeriesFrame::from_columns(&refs, cols, 0).unwrap()
    }

    #[test]
    fn constant_column_gets_unit_std() {
        let p = fit_standardizer(&frame(&[vec![5.0; 3]]), 0..3).unwrap();
        assert_eq!(p.mean, vec![5.0]);
        assert_eq!(p.std, vec![1.0]);
    }

    #[test]
    fn population_std() {
        let p = fit_standardizer(&frame(&[vec![1., 2., 3.]]), 0..3).unwrap();
        assert_eq!(p.mean, vec![2.0]);
        assert!((p.std[0] - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn per_feature_fit() {
        let p = fit_standardizer(&frame(&[vec![1., 2., 3.], vec![10., 20., 30.]]), 0..3).unwrap();
        assert_eq!(p.mean, vec![2.0, 20.0]);
    }

    #[test]
    fn empty_range_is_usage_error() {
        assert!(matches!(
            fit_standardizer(&frame(&[vec![1., 2.]]), 1..1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn apply_and_invert_arithmetic() {
        let p = StandardizationParams {
            mean: vec![2.0],
            std: vec![0.8165],
            feature_names: vec!["f0".into()],
        };
        let z = apply_standardizer(&frame(&[vec![3.0]]), &p).unwrap();
        assert!((z.values()[0] - 1.2247).abs() < 1e-3);
        assert_eq!(invert_standardizer(&[0.0], &p, 0), vec![2.0]);
        assert!((invert_standardizer(&[1.2247], &p, 0)[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn own_training_data_has_zero_mean_unit_variance() {
        let f = frame(&[
            vec![3., 1., 4., 1., 5., 9., 2., 6.],
            vec![2., 7., 1., 8., 2., 8., 1., 8.],
        ]);
        let p = fit_standardizer(&f, 0..8).unwrap();
        let z = apply_standardizer(&f, &p).unwrap();
        for j in 0..2 {
            let c = z.column(j);
            let m = c.iter().sum::<f64>() / 8.0;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let p = fit_standardizer(&frame(&[vec![1., 2.]]), 0..2).unwrap();
        let two = frame(&[vec![1., 2.], vec![3., 4.]]);
        assert!(matches!(apply_standardizer(&two, &p), Err(Error::Usage(_))));
    }

    #[test]
    fn json_round_trip() {
        let p = fit_standardizer(&frame(&[vec![1., 2., 4.]]), 0..3).unwrap();
        assert_eq!(StandardizationParams::from_json(&p.to_json()).unwrap(), p);
        assert!(p.to_json().contains("\"feature_names\""));
    }
}
