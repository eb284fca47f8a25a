use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::error::{Error, Result};

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!(
                "split fractions must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Row counts for a series of `t` rows; the test split takes the remainder.
    pub fn sizes(&self, t: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let train = ((t as f64) * self.train).round() as usize;
        let val = (((t as f64) * self.val).round() as usize).min(t - train.min(t));
        let train = train.min(t);
        Ok([train, val, t - train - val])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
}

impl Splits {
    /// Row offsets of the val and test splits in the source frame.
    pub fn offsets(&self) -> [usize; 3] {
        [0, self.train.len(), self.train.len() + self.val.len()]
    }
}

pub fn split_chronological(frame: &SeriesFrame, spec: &SplitSpec) -> Result<Splits> {
    let [a, b, _] = spec.sizes(frame.len())?;
    Ok(Splits {
        train: frame.slice(0..a),
        val: frame.slice(a..a + b),
        test: frame.slice(a + b..frame.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> SeriesFrame {
        SeriesFrame::from_columns(&["price"], &[(0..t).map(|i| i as f64).collect()], 0).unwrap()
    }

    #[test]
    fn seventy_ten_twenty() {
        let s = split_chronological(&ramp(100), &SplitSpec::default()).unwrap();
        assert_eq!([s.train.len(), s.val.len(), s.test.len()], [70, 10, 20]);
        assert!(s.train.timestamps().last() < s.val.timestamps().first());
        assert!(s.val.timestamps().last() < s.test.timestamps().first());
    }

    #[test]
    fn everything_in_train() {
        let spec = SplitSpec {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let s = split_chronological(&ramp(10), &spec).unwrap();
        assert_eq!([s.train.len(), s.val.len(), s.test.len()], [10, 0, 0]);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let spec = SplitSpec {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(matches!(split_chronological(&ramp(10), &spec), Err(Error::Usage(_))));
    }

    #[test]
    fn partition_concatenates_back() {
        for t in [1usize, 7, 33, 100, 257] {
            let f = ramp(t);
            for spec in [
                SplitSpec::default(),
                SplitSpec {
                    train: 0.6,
                    val: 0.2,
                    test: 0.2,
                },
                SplitSpec {
                    train: 0.34,
                    val: 0.33,
                    test: 0.33,
                },
            ] {
                let s = split_chronological(&f, &spec).unwrap();
                assert_eq!(SeriesFrame::concat(&[s.train, s.val, s.test]).unwrap(), f);
            }
        }
    }
}
