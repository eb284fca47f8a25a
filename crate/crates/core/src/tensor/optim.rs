use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Adam {
            config,
            state: OptimizerState::for_params(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || self.state.first_moment.len() != params.len() {
            return Err(Error::usage(format!(
                "optimizer expected {} gradient blocks, got {}",
                params.len(),
                grads.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if grads[i].len() != t.len() || self.state.first_moment[i].len() != t.len() {
                return Err(Error::dimension("adam_step", t.shape(), &[grads[i].len()]));
            }
            if grads[i].iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient for parameter `{name}`")));
            }
        }
        self.state.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.state.step as f64;
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            let p = params.values_mut(i);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_scalar(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = one_scalar(3.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert_eq!(p.tensors().next().unwrap().values(), &[3.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let mut p = one_scalar(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        let w = p.tensors().next().unwrap().values()[0];
        assert!((w - 0.9).abs() < 1e-7, "{w}");
    }

    #[test]
    fn step_counter_increments() {
        let mut p = one_scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[vec![0.5]]).unwrap();
        opt.step(&mut p, &[vec![0.5]]).unwrap();
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = one_scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &[vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(opt.state.step, 0);
    }
}
