use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Standardized,
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
    pub units: Units,
}

impl MetricSet {
    pub fn compute(y: &[f64], y_hat: &[f64], units: Units) -> Result<Self> {
        Ok(MetricSet {
            mse: mse(y, y_hat)?,
            mae: mae(y, y_hat)?,
            n: y.len(),
            units,
        })
    }
}

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::usage(format!(
            "metric inputs differ in length: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::usage("metrics need at least one value"));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}
