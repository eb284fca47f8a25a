use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One supervised pair: `input_len` rows in, `horizon` target values out.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `L×d` feature block.
    pub input: Tensor,
    /// Target column over `origin_index+1 ..= origin_index+H`.
    pub target: Vec<f64>,
    /// Frame position of the last input row.
    pub origin_index: usize,
}

/// Number of windows `make_windows` produces.
pub fn window_count(t: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if t < input_len + horizon || stride == 0 {
        0
    } else {
        (t - input_len - horizon) / stride + 1
    }
}

pub fn make_windows(frame: &SeriesFrame, input_len: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::usage("window lengths and stride must be positive"));
    }
    let t = frame.len();
    if t < input_len + horizon {
        return Err(Error::usage(format!(
            "series of {t} rows is too short for windows: need at least {} (L={input_len} + H={horizon})",
            input_len + horizon
        )));
    }
    let d = frame.n_features();
    let target = frame.target();
    let n = window_count(t, input_len, horizon, stride);
    Ok((0..n)
        .map(|k| {
            let start = k * stride;
            let origin = start + input_len - 1;
            WindowSample {
                input: Tensor::matrix(input_len, d, frame.rows(start..start + input_len).to_vec()),
                target: target[origin + 1..origin + 1 + horizon].to_vec(),
                origin_index: origin,
            }
        })
        .collect())
}

/// Input/target lengths used when windowing for a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub input_len: usize,
    pub horizon: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> SeriesFrame {
        let v: Vec<f64> = (0..t).map(|i| i as f64).collect();
        SeriesFrame::from_columns(&["price"], &[v], 0).unwrap()
    }

    #[test]
    fn count_example() {
        assert_eq!(make_windows(&ramp(10), 4, 2, 1).unwrap().len(), 5);
    }

    #[test]
    fn exact_fit_gives_one_window() {
        let w = make_windows(&ramp(6), 4, 2, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].origin_index, 3);
        assert_eq!(w[0].target, vec![4.0, 5.0]);
    }

    #[test]
    fn too_short_names_minimum() {
        let err = make_windows(&ramp(5), 4, 2, 1).unwrap_err();
        assert!(err.to_string().contains("at least 6"), "{err}");
    }

    #[test]
    fn count_formula_exhaustive() {
        for t in 1..=64 {
            let f = ramp(t);
            for l in 1..=t {
                for h in 1..=(t - l).max(1) {
                    for s in 1..=4 {
                        let expect = window_count(t, l, h, s);
                        match make_windows(&f, l, h, s) {
                            Ok(ws) => {
                                assert_eq!(ws.len(), expect);
                                assert_eq!(ws.len(), (t - l - h) / s + 1);
                                for w in &ws {
                                    // target starts right after the last input row
                                    assert_eq!(w.input.values()[l - 1], w.origin_index as f64);
                                    assert_eq!(w.target[0], (w.origin_index + 1) as f64);
                                    assert_eq!(w.target.len(), h);
                                }
                                assert!(ws.windows(2).all(|p| p[0].origin_index < p[1].origin_index));
                            }
                            Err(_) => assert!(t < l + h),
                        }
                    }
                }
            }
        }
    }
}
