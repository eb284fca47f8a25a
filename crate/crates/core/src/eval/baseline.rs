use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Repeats the last observed value `h` times.
pub fn persistence_baseline(history: &[f64], h: usize) -> Result<Vec<f64>> {
    let last = history
        .last()
        .ok_or_else(|| Error::usage("persistence needs a non-empty history"))?;
    Ok(vec![*last; h])
}

/// Least-squares AR(p) without intercept: `y_t = Σ a_k·y_{t−k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArFit {
    /// `coefficients[k]` multiplies `y_{t−k−1}`.
    pub coefficients: Vec<f64>,
    /// The last `p` fitted values, oldest first.
    pub tail: Vec<f64>,
}

/// Solves the normal equations `XᵀX a = Xᵀy` over the lagged design matrix.
pub fn ar_fit(series: &[f64], p: usize) -> Result<ArFit> {
    if p == 0 {
        return Err(Error::usage("AR order must be at least 1"));
    }
    if series.len() <= p + 1 {
        return Err(Error::usage(format!(
            "AR({p}) needs more than {} values, got {}",
            p + 1,
            series.len()
        )));
    }
    let rows = series.len() - p;
    let x = DMatrix::from_fn(rows, p, |r, k| series[r + p - 1 - k]);
    let y = DVector::from_iterator(rows, series[p..].iter().copied());
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let scale = xtx.diagonal().max().max(f64::MIN_POSITIVE);
    let singular = || Error::numeric(format!("AR({p}) normal matrix is singular; try a smaller order"));
    let chol = xtx.clone().cholesky().ok_or_else(singular)?;
    if chol.l_dirty().diagonal().iter().any(|d| d * d <= 1e-12 * scale) {
        return Err(singular());
    }
    let a = chol.solve(&xty);
    Ok(ArFit {
        coefficients: a.iter().copied().collect(),
        tail: series[series.len() - p..].to_vec(),
    })
}

impl ArFit {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    /// Recursive `h`-step forecast continuing `history`.
    pub fn forecast_from(&self, history: &[f64], h: usize) -> Result<Vec<f64>> {
        let p = self.order();
        if history.len() < p {
            return Err(Error::usage(format!(
                "AR({p}) forecast needs {p} history values, got {}",
                history.len()
            )));
        }
        let mut buf = history[history.len() - p..].to_vec();
        let mut out = Vec::with_capacity(h);
        for _ in 0..h {
            let next: f64 = self
                .coefficients
                .iter()
                .enumerate()
                .map(|(k, a)| a * buf[buf.len() - 1 - k])
                .sum();
            buf.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Forecast continuing the fitted series.
    pub fn forecast(&self, h: usize) -> Vec<f64> {
        self.forecast_from(&self.tail, h).expect("tail holds p values")
    }
}
