use serde::{Deserialize, Serialize};

use crate::asm::AsmConfig;
use crate::dat::DatConfig;
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::training::TrainOptions;

/// Fewest extreme windows worth training a transformer on.
pub const MIN_EXTREME_WINDOWS: usize = 8;

/// Everything `train_pipeline` needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dat: DatConfig,
    pub asm: AsmConfig,
    pub split: SplitSpec,
    /// λ in `λ·extreme + (1−λ)·normal`.
    pub blend_weight: f64,
    /// Master seed; every sub-model derives its own stream from it.
    pub seed: u64,
    /// Options for the normal and extreme DATs. The seed is overridden.
    pub dat_training: TrainOptions,
    /// Options for the ASM. The seed and weight decay are overridden.
    pub asm_training: TrainOptions,
    /// Step between consecutive DAT training windows.
    pub window_stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dat: DatConfig::default(),
            asm: AsmConfig::default(),
            split: SplitSpec::default(),
            blend_weight: 0.5,
            seed: 0,
            dat_training: TrainOptions {
                batch_size: 32,
                ..TrainOptions::default()
            },
            asm_training: TrainOptions {
                max_epochs: 30,
                batch_size: 32,
                adam: crate::tensor::AdamConfig {
                    learning_rate: 1e-3,
                    ..Default::default()
                },
                ..TrainOptions::default()
            },
            window_stride: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        self.dat.validate()?;
        self.asm.validate(n_features)?;
        self.split.validate()?;
        validate_blend(self.blend_weight)?;
        if self.window_stride == 0 {
            return Err(Error::usage("window_stride must be at least 1"));
        }
        if self.asm.window_len > self.dat.input_len {
            return Err(Error::usage(format!(
                "ASM window {} is longer than the DAT input window {}",
                self.asm.window_len, self.dat.input_len
            )));
        }
        Ok(())
    }

    /// Shape of the extreme-condition DAT: `2n` in, `n` out.
    pub fn extreme_dat(&self) -> DatConfig {
        self.dat.with_shape(2 * self.asm.extreme_n, self.asm.extreme_n)
    }
}

pub(crate) fn validate_blend(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::usage(format!("blend weight {lambda} outside [0, 1]")))
    }
}
