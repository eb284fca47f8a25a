//! Minibatch Adam with early stopping, shared by every trainable model.
//!
//! Each sample is differentiated on its own tape and the per-sample
//! gradients are summed in sample order, so results are bit-identical for
//! any worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamStore, SeededRng, Tape, Var};

/// A model that can score one sample on a tape.
pub trait Objective: Sync {
    type Sample: Sync;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the scalar loss for `sample`. `rng` is present in training
    /// mode and drives dropout.
    fn sample_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sample: &Self::Sample,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Coupled L2 coefficient: `wd·θ` is added to every gradient.
    pub weight_decay: f64,
    pub seed: u64,
    /// Worker threads for per-sample gradients; 0 or 1 runs inline.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_epochs: 100,
            patience: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
            weight_decay: 0.0,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of the initial parameters.
    pub initial_train_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// SplitMix64 finalizer over three words, for per-sample RNG streams.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::usage(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn map_ordered<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    if threads <= 1 {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Loss and gradient of one sample with the current parameters.
pub fn sample_gradient<M: Objective>(
    model: &M,
    sample: &M::Sample,
    rng: Option<&mut SeededRng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = tape.bind(model.params());
    let loss = model.sample_loss(&mut tape, &vars, sample, rng)?;
    let value = tape.value(loss).values()[0];
    tape.backward(loss)?;
    Ok((value, tape.param_grads(&vars)))
}

/// Loss of one sample in inference mode.
pub fn sample_value<M: Objective>(model: &M, sample: &M::Sample) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params().tensors().map(|t| tape.constant(t.clone())).collect();
    let loss = model.sample_loss(&mut tape, &vars, sample, None)?;
    Ok(tape.value(loss).values()[0])
}

/// Per-sample inference losses, in sample order.
pub fn sample_values<M: Objective>(model: &M, samples: &[M::Sample], threads: usize) -> Result<Vec<f64>> {
    with_pool(threads, || {
        map_ordered(threads, samples, |_, s| sample_value(model, s))
            .into_iter()
            .collect()
    })?
}

fn mean_loss<M: Objective>(model: &M, samples: &[M::Sample], threads: usize) -> Result<f64> {
    let v = sample_values(model, samples, threads)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains `model` in place and restores the parameters of the best epoch.
///
/// The monitored quantity is the validation loss when `val` is non-empty,
/// otherwise the epoch's mean training loss.
pub fn fit<M: Objective>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::usage("no training samples"));
    }
    if opts.batch_size == 0 || opts.max_epochs == 0 {
        return Err(Error::usage("batch size and epoch cap must be positive"));
    }
    let threads = opts.threads.max(1);
    let mut adam = Adam::new(opts.adam, model.params());
    let initial_train_loss = mean_loss(model, train, threads)?;
    let initial_val_loss = if val.is_empty() {
        None
    } else {
        Some(mean_loss(model, val, threads)?)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut SeededRng::seed_from_u64(derive_seed(opts.seed, epoch as u64, 0)));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let frozen: &M = model;
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = with_pool(threads, || {
                map_ordered(threads, batch, |k, &i| {
                    let mut rng = SeededRng::seed_from_u64(derive_seed(
                        opts.seed,
                        epoch as u64,
                        (b * opts.batch_size + k + 1) as u64,
                    ));
                    sample_gradient(frozen, &train[i], Some(&mut rng))
                })
            })?;
            let mut total: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("non-finite training loss in epoch {epoch}")));
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => {
                        for (acc, g) in t.iter_mut().zip(&grads) {
                            acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for (g, p) in grads.iter_mut().zip(model.params().tensors()) {
                for (gi, pi) in g.iter_mut().zip(p.values()) {
                    *gi = *gi * scale + opts.weight_decay * pi;
                }
            }
            adam.step(model.params_mut(), &grads)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(model, val, threads)?)
        };
        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::numeric(format!("non-finite loss after epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if monitored < best.0 {
            best = (monitored, epoch, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().load_from(&best.2)?;
    Ok(TrainHistory {
        initial_train_loss,
        initial_val_loss,
        epochs,
        best_epoch: best.1,
        stopped_early,
    })
}
