use serde::{Deserialize, Serialize};

use super::AttentionKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder depth k: k−1 distilling layers then one plain attention layer.
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    /// Input window length L.
    pub input_len: usize,
    /// Forecast horizon H.
    pub horizon: usize,
    /// Known target values prepended to the decoder seed.
    pub label_len: usize,
    /// Factor c in the kept-query count `⌈c·ln L⌉`.
    pub importance_factor: f64,
    pub dropout: f64,
    /// Encoder self-attention variant.
    pub attention: AttentionKind,
    /// Halve the sequence between encoder layers.
    pub distill: bool,
}

impl Default for DatConfig {
    fn default() -> Self {
        DatConfig {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 3,
            n_decoder_layers: 2,
            d_ff: 128,
            input_len: 96,
            horizon: 24,
            label_len: 24,
            importance_factor: 5.0,
            dropout: 0.05,
            attention: AttentionKind::Importance,
            distill: true,
        }
    }
}

impl DatConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!("DAT config: {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::usage(format!(
                "DAT config: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.label_len > self.input_len {
            return Err(Error::usage(format!(
                "DAT config: label_len {} exceeds input_len {}",
                self.label_len, self.input_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage("DAT config: dropout must be in [0, 1)"));
        }
        if !(self.importance_factor > 0.0 && self.importance_factor.is_finite()) {
            return Err(Error::usage("DAT config: importance_factor must be positive"));
        }
        Ok(())
    }

    /// Sequence length seen by each encoder attention layer.
    pub fn encoder_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.input_len];
        for _ in 1..self.n_encoder_layers {
            let last = *lens.last().expect("non-empty");
            lens.push(if self.distill { last.div_ceil(2) } else { last });
        }
        lens
    }

    /// Same architecture for a different window shape.
    pub fn with_shape(&self, input_len: usize, horizon: usize) -> DatConfig {
        DatConfig {
            input_len,
            horizon,
            label_len: horizon.min(input_len),
            ..self.clone()
        }
    }
}
