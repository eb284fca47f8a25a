use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ThresholdPolicy;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::training::{derive_seed, fit, Objective, TrainHistory, TrainOptions};

pub const CHECKPOINT_KIND: &str = "asm";
const MIN_TRAIN_WINDOWS: usize = 32;
const SCORE_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsmConfig {
    /// Steps per reconstruction unit.
    pub window_len: usize,
    /// Encoder widths between the flattened input and the bottleneck.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub weight_decay: f64,
    pub threshold: ThresholdPolicy,
    /// n: extreme windows take 2n input steps and n target steps.
    pub extreme_n: usize,
}

impl Default for AsmConfig {
    fn default() -> Self {
        AsmConfig {
            window_len: 24,
            hidden: vec![128],
            latent_dim: 32,
            weight_decay: 1e-3,
            threshold: ThresholdPolicy::Quantile(0.99),
            extreme_n: 50,
        }
    }
}

impl AsmConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        let input = self.window_len * n_features;
        if self.window_len == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::usage("ASM config: widths must be positive"));
        }
        if self.latent_dim >= input {
            return Err(Error::usage(format!(
                "ASM config: latent_dim {} is not a bottleneck for input width {input}",
                self.latent_dim
            )));
        }
        if self.extreme_n == 0 {
            return Err(Error::usage("ASM config: extreme_n must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::usage("ASM config: weight_decay must be non-negative"));
        }
        self.threshold.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsmMeta {
    pub config: AsmConfig,
    pub n_features: usize,
}

/// Feed-forward autoencoder over flattened `w×d` windows.
#[derive(Clone, Debug)]
pub struct AsmModel {
    config: AsmConfig,
    n_features: usize,
    params: ParamStore,
    encoder: Vec<(ParamId, ParamId)>,
    decoder: Vec<(ParamId, ParamId)>,
}

impl AsmModel {
    pub fn new(config: AsmConfig, n_features: usize, seed: u64) -> Result<Self> {
        config.validate(n_features)?;
        let mut rng = seeded_rng(seed);
        let mut widths = vec![config.window_len * n_features];
        widths.extend(&config.hidden);
        widths.push(config.latent_dim);
        let mut params = ParamStore::new();
        let stack = |prefix: &str, dims: &[usize], p: &mut ParamStore, rng: &mut SeededRng| {
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| {
                    (
                        p.add_glorot(&format!("{prefix}.{i}.w"), &[w[0], w[1]], rng),
                        p.add_const(&format!("{prefix}.{i}.b"), &[w[1]], 0.0),
                    )
                })
                .collect::<Vec<_>>()
        };
        let encoder = stack("enc", &widths, &mut params, &mut rng);
        widths.reverse();
        let decoder = stack("dec", &widths, &mut params, &mut rng);
        Ok(AsmModel {
            config,
            n_features,
            params,
            encoder,
            decoder,
        })
    }

    pub fn from_parts(meta: AsmMeta, params: &ParamStore) -> Result<Self> {
        let mut m = AsmModel::new(meta.config, meta.n_features, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn meta(&self) -> AsmMeta {
        AsmMeta {
            config: self.config.clone(),
            n_features: self.n_features,
        }
    }

    pub fn config(&self) -> &AsmConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Flattened window width `w·d`.
    pub fn input_width(&self) -> usize {
        self.config.window_len * self.n_features
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta()).expect("config serializes");
        checkpoint::write(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = checkpoint::read_kind(path, CHECKPOINT_KIND)?;
        let meta: AsmMeta = serde_json::from_value(ck.meta)
            .map_err(|e| Error::format(format!("{}: ASM metadata: {e}", path.display())))?;
        AsmModel::from_parts(meta, &ck.params)
    }

    /// Dense stack with GELU between layers and a linear last layer.
    fn stack_on(tape: &mut Tape, vars: &[Var], layers: &[(ParamId, ParamId)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in layers.iter().enumerate() {
            h = tape.matmul(h, vars[w.index()])?;
            h = tape.add_row(h, vars[b.index()])?;
            if i + 1 < layers.len() {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Reconstructs every row of `x: B×(w·d)`.
    pub fn reconstruct_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let z = Self::stack_on(tape, vars, &self.encoder, x)?;
        Self::stack_on(tape, vars, &self.decoder, z)
    }

    fn run(&self, layers: &[(ParamId, ParamId)], rows: usize, x: &[f64]) -> Result<Vec<f64>> {
        let width = self.params.get(layers[0].0).shape()[0];
        if x.len() != rows * width {
            return Err(Error::usage(format!(
                "ASM input has {} values, expected {rows}×{width}",
                x.len()
            )));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(Tensor::matrix(rows, width, x.to_vec()));
        let y = Self::stack_on(&mut tape, &vars, layers, xv)?;
        Ok(tape.value(y).values().to_vec())
    }

    /// Latent code of one flattened window.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.run(&self.encoder, 1, x)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.run(&self.decoder, 1, z)
    }

    /// `‖x − x̂‖²` for each flattened window.
    pub fn reconstruction_errors(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let width = self.input_width();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(SCORE_CHUNK) {
            let mut flat = Vec::with_capacity(chunk.len() * width);
            for w in chunk {
                if w.len() != width {
                    return Err(Error::usage(format!(
                        "ASM window has {} values, expected {width}",
                        w.len()
                    )));
                }
                flat.extend_from_slice(w);
            }
            let z = self.run(&self.encoder, chunk.len(), &flat)?;
            let xh = self.run(&self.decoder, chunk.len(), &z)?;
            out.extend(
                flat.chunks_exact(width)
                    .zip(xh.chunks_exact(width))
                    .map(|(a, b)| reconstruction_error(a, b)),
            );
        }
        Ok(out)
    }
}

/// Squared Euclidean distance.
pub fn reconstruction_error(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum()
}

/// A group of flattened windows trained as one unit.
pub struct AsmBatch(pub Tensor);

impl Objective for AsmModel {
    type Sample = AsmBatch;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Mean over the rows of `‖x − x̂‖²`.
    fn sample_loss(&self, tape: &mut Tape, vars: &[Var], sample: &AsmBatch, _: Option<&mut SeededRng>) -> Result<Var> {
        let rows = sample.0.rows();
        let x = tape.constant(sample.0.clone());
        let xh = self.reconstruct_on(tape, vars, x)?;
        let diff = tape.sub(xh, x)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / rows as f64))
    }
}

/// Outcome of [`asm_train`].
#[derive(Clone, Debug)]
pub struct AsmTraining {
    pub model: AsmModel,
    pub history: TrainHistory,
    /// Reconstruction error of every training window under the final model.
    pub training_errors: Vec<f64>,
}

/// Trains an autoencoder on flattened windows.
///
/// Windows are shuffled once and grouped into fixed micro-batches of `opts.batch_size` rows
/// that form one optimization step each; `opts.weight_decay` is replaced by
/// the config's coefficient.
pub fn asm_train(
    windows: &[Vec<f64>],
    config: &AsmConfig,
    n_features: usize,
    opts: &TrainOptions,
) -> Result<AsmTraining> {
    if windows.len() < MIN_TRAIN_WINDOWS {
        return Err(Error::usage(format!(
            "ASM training needs at least {MIN_TRAIN_WINDOWS} windows, got {}",
            windows.len()
        )));
    }
    let mut model = AsmModel::new(config.clone(), n_features, opts.seed)?;
    let width = model.input_width();
    if let Some(w) = windows.iter().find(|w| w.len() != width) {
        return Err(Error::usage(format!(
            "ASM window has {} values, expected {width}",
            w.len()
        )));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut seeded_rng(derive_seed(opts.seed, u64::MAX, 0)));
    let batches: Vec<AsmBatch> = order
        .chunks(opts.batch_size.max(1))
        .map(|c| {
            let flat: Vec<f64> = c.iter().flat_map(|&i| windows[i].iter().copied()).collect();
            AsmBatch(Tensor::matrix(c.len(), width, flat))
        })
        .collect();
    let opts = TrainOptions {
        batch_size: 1,
        weight_decay: config.weight_decay,
        ..opts.clone()
    };
    let history = fit(&mut model, &batches, &[], &opts)?;
    let training_errors = model.reconstruction_errors(windows)?;
    Ok(AsmTraining {
        model,
        history,
        training_errors,
    })
}
