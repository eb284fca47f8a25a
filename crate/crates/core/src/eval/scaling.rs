use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dat::{AttentionKind, DatConfig, DatModel};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

pub const MIN_PROBES: usize = 4;
pub const MIN_LENGTH: usize = 16;
pub const MIN_REPEATS: usize = 5;
/// Smallest median forward time the timer is trusted with.
const MIN_RESOLVABLE: Duration = Duration::from_micros(20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Full attention, no distillation.
    Full,
    /// Importance attention with distillation.
    Distilled,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Full => "full",
            EncoderVariant::Distilled => "distilled",
        }
    }

    pub fn config(self, input_len: usize, d_model: usize) -> DatConfig {
        let (attention, distill) = match self {
            EncoderVariant::Full => (AttentionKind::Full, false),
            EncoderVariant::Distilled => (AttentionKind::Importance, true),
        };
        DatConfig {
            d_model,
            n_heads: 1,
            n_encoder_layers: 3,
            n_decoder_layers: 1,
            d_ff: 2 * d_model,
            input_len,
            horizon: 1,
            label_len: 1,
            dropout: 0.0,
            attention,
            distill,
            ..DatConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScaling {
    pub variant: EncoderVariant,
    /// Median encoder forward time per probed length.
    pub median_seconds: Vec<f64>,
    pub peak_elements: Vec<usize>,
    /// Slope `b` of `ln t = ln a + b·ln L`.
    pub time_exponent: f64,
    pub memory_exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub repeats: usize,
    pub variants: Vec<VariantScaling>,
}

impl ScalingReport {
    pub fn variant(&self, v: EncoderVariant) -> Option<&VariantScaling> {
        self.variants.iter().find(|s| s.variant == v)
    }

    /// `length,variant,median_seconds,peak_elements` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,variant,median_seconds,peak_elements\n");
        for v in &self.variants {
            for (i, l) in self.lengths.iter().enumerate() {
                writeln!(
                    s,
                    "{l},{},{:e},{}",
                    v.variant.name(),
                    v.median_seconds[i],
                    v.peak_elements[i]
                )
                .expect("writing to a String");
            }
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>8}  {:<10} {:>14} {:>14}\n",
            "length", "variant", "median_s", "peak_elements"
        );
        for v in &self.variants {
            for (i, l) in self.lengths.iter().enumerate() {
                writeln!(
                    s,
                    "{l:>8}  {:<10} {:>14.6e} {:>14}",
                    v.variant.name(),
                    v.median_seconds[i],
                    v.peak_elements[i]
                )
                .expect("writing to a String");
            }
        }
        for v in &self.variants {
            writeln!(
                s,
                "{} exponents: time {:.3}, memory {:.3}",
                v.variant.name(),
                v.time_exponent,
                v.memory_exponent
            )
            .expect("writing to a String");
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the encoder forward pass of both variants at each length.
///
/// One warm-up pass per probe is excluded; the median of `repeats` timed
/// passes is reported. Probes run sequentially.
pub fn bench_attention_scaling(lengths: &[usize], d_model: usize, repeats: usize) -> Result<ScalingReport> {
    if lengths.len() < MIN_PROBES {
        return Err(Error::usage(format!(
            "need at least {MIN_PROBES} lengths, got {}",
            lengths.len()
        )));
    }
    if lengths.iter().any(|&l| l < MIN_LENGTH) {
        return Err(Error::usage(format!(
            "every probed length must be at least {MIN_LENGTH}"
        )));
    }
    if lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("probed lengths must be strictly increasing"));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::usage(format!(
            "need at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    let mut rng = seeded_rng(0xBE7C);
    let mut variants = Vec::new();
    for variant in [EncoderVariant::Full, EncoderVariant::Distilled] {
        let mut median_seconds = Vec::new();
        let mut peak_elements = Vec::new();
        for &l in lengths {
            let model = DatModel::new(variant.config(l, d_model), 1, 0, 7)?;
            let x = Tensor::matrix(l, 1, (0..l).map(|_| rng.random_range(-2.0..2.0)).collect());
            let (_, peak) = model.encode_profiled(&x)?;
            let times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    model.encode(&x).map(|_| t.elapsed().as_secs_f64())
                })
                .collect::<Result<_>>()?;
            let m = median(times);
            if m < MIN_RESOLVABLE.as_secs_f64() {
                return Err(Error::usage(format!(
                    "encoder pass at L={l} takes {m:.2e}s, below timer resolution; probe larger lengths"
                )));
            }
            median_seconds.push(m);
            peak_elements.push(peak);
        }
        let xs: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        let mem: Vec<f64> = peak_elements.iter().map(|&p| p as f64).collect();
        variants.push(VariantScaling {
            variant,
            time_exponent: log_log_slope(&xs, &median_seconds),
            memory_exponent: log_log_slope(&xs, &mem),
            median_seconds,
            peak_elements,
        });
    }
    Ok(ScalingReport {
        lengths: lengths.to_vec(),
        d_model,
        repeats,
        variants,
    })
}
