use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::attention::{multi_head, AttnIds};
use super::{AttentionKind, DatConfig};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::training::Objective;

/// Fixed sinusoidal table: `sin` on even columns, `cos` on odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut v = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            v[pos * d + i] = angle.sin();
            if i + 1 < d {
                v[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(len, d, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `L_final × d_model`.
    pub memory: Tensor,
    /// Input length of each encoder attention layer, in order.
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    attn: AttnIds,
    ln1: LnIds,
    ffn: FfnIds,
    ln2: LnIds,
    conv: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: AttnIds,
    ln1: LnIds,
    cross: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
    ln3: LnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    enc: Vec<EncLayer>,
    enc_norm: LnIds,
    dec_embed: ParamId,
    dec: Vec<DecLayer>,
    dec_norm: LnIds,
    out_w: ParamId,
    out_b: ParamId,
}

fn ln_ids(p: &mut ParamStore, prefix: &str, d: usize) -> LnIds {
    LnIds {
        gain: p.add_const(&format!("{prefix}.gain"), &[d], 1.0),
        bias: p.add_const(&format!("{prefix}.bias"), &[d], 0.0),
    }
}

fn ffn_ids(p: &mut ParamStore, prefix: &str, d: usize, dff: usize, rng: &mut SeededRng) -> FfnIds {
    let w1 = p.add_glorot(&format!("{prefix}.w1"), &[d, dff], rng);
    let b1 = p.add_const(&format!("{prefix}.b1"), &[dff], 0.0);
    let w2 = p.add_glorot(&format!("{prefix}.w2"), &[dff, d], rng);
    let b2 = p.add_const(&format!("{prefix}.b2"), &[d], 0.0);
    FfnIds { w1, b1, w2, b2 }
}

fn declare(cfg: &DatConfig, n_features: usize, rng: &mut SeededRng) -> (ParamStore, Layout) {
    let (d, dff) = (cfg.d_model, cfg.d_ff);
    let mut p = ParamStore::new();
    let embed = p.add_glorot("embed.w", &[n_features, d], rng);
    let enc = (0..cfg.n_encoder_layers)
        .map(|j| {
            let pre = format!("enc.{j}");
            let attn = AttnIds::declare(&mut p, &format!("{pre}.attn"), d, rng);
            let ln1 = ln_ids(&mut p, &format!("{pre}.ln1"), d);
            let ffn = ffn_ids(&mut p, &format!("{pre}.ffn"), d, dff, rng);
            let ln2 = ln_ids(&mut p, &format!("{pre}.ln2"), d);
            let conv = (cfg.distill && j + 1 < cfg.n_encoder_layers).then(|| {
                (
                    p.add_glorot(&format!("{pre}.conv.w"), &[3, d, d], rng),
                    p.add_const(&format!("{pre}.conv.b"), &[d], 0.0),
                )
            });
            EncLayer {
                attn,
                ln1,
                ffn,
                ln2,
                conv,
            }
        })
        .collect();
    let enc_norm = ln_ids(&mut p, "enc.norm", d);
    let dec_embed = p.add_glorot("dec.embed.w", &[1, d], rng);
    let dec = (0..cfg.n_decoder_layers)
        .map(|j| {
            let pre = format!("dec.{j}");
            DecLayer {
                self_attn: AttnIds::declare(&mut p, &format!("{pre}.self"), d, rng),
                ln1: ln_ids(&mut p, &format!("{pre}.ln1"), d),
                cross: AttnIds::declare(&mut p, &format!("{pre}.cross"), d, rng),
                ln2: ln_ids(&mut p, &format!("{pre}.ln2"), d),
                ffn: ffn_ids(&mut p, &format!("{pre}.ffn"), d, dff, rng),
                ln3: ln_ids(&mut p, &format!("{pre}.ln3"), d),
            }
        })
        .collect();
    let dec_norm = ln_ids(&mut p, "dec.norm", d);
    let out_w = p.add_glorot("out.w", &[d, 1], rng);
    let out_b = p.add_const("out.b", &[1], 0.0);
    (
        p,
        Layout {
            embed,
            enc,
            enc_norm,
            dec_embed,
            dec,
            dec_norm,
            out_w,
            out_b,
        },
    )
}

/// One forward recording: the tape, bound parameters and optional dropout RNG.
pub struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    pub rng: Option<&'a mut SeededRng>,
}

impl Pass<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    fn drop(&mut self, x: Var, rate: f64) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => self.tape.dropout(x, rate, rng),
            _ => x,
        }
    }

    fn ln(&mut self, x: Var, ids: &LnIds) -> Result<Var> {
        let (g, b) = (self.p(ids.gain), self.p(ids.bias));
        self.tape.layer_norm(x, g, b)
    }

    fn ffn(&mut self, x: Var, ids: &FfnIds) -> Result<Var> {
        let h = self.tape.matmul(x, self.p(ids.w1))?;
        let h = self.tape.add_row(h, self.p(ids.b1))?;
        let h = self.tape.gelu(h);
        let y = self.tape.matmul(h, self.p(ids.w2))?;
        self.tape.add_row(y, self.p(ids.b2))
    }

    /// `LN(x + dropout(f))`.
    fn residual(&mut self, x: Var, f: Var, ln: &LnIds, rate: f64) -> Result<Var> {
        let f = self.drop(f, rate);
        let s = self.tape.add(x, f)?;
        self.ln(s, ln)
    }
}

/// Distilled attention transformer with a one-pass generative decoder.
#[derive(Debug)]
pub struct DatModel {
    config: DatConfig,
    n_features: usize,
    target_index: usize,
    params: ParamStore,
    layout: Layout,
    decoder_calls: AtomicUsize,
}

impl Clone for DatModel {
    fn clone(&self) -> Self {
        DatModel {
            config: self.config.clone(),
            n_features: self.n_features,
            target_index: self.target_index,
            params: self.params.clone(),
            layout: self.layout.clone(),
            decoder_calls: AtomicUsize::new(0),
        }
    }
}

/// Header metadata persisted alongside DAT parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatMeta {
    pub config: DatConfig,
    pub n_features: usize,
    pub target_index: usize,
}

impl DatModel {
    /// Fresh model with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: DatConfig, n_features: usize, target_index: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_features == 0 || target_index >= n_features {
            return Err(Error::usage(format!(
                "target index {target_index} out of range for {n_features} features"
            )));
        }
        let (params, layout) = declare(&config, n_features, &mut seeded_rng(seed));
        Ok(DatModel {
            config,
            n_features,
            target_index,
            params,
            layout,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model from persisted parameters.
    pub fn from_parts(meta: DatMeta, params: &ParamStore) -> Result<Self> {
        let mut m = DatModel::new(meta.config, meta.n_features, meta.target_index, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn meta(&self) -> DatMeta {
        DatMeta {
            config: self.config.clone(),
            n_features: self.n_features,
            target_index: self.target_index,
        }
    }

    pub fn config(&self) -> &DatConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Decoder forward passes run since construction.
    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    fn frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().map(|t| tape.constant(t.clone())).collect()
    }

    fn check_window(&self, x: &Tensor, expect_len: Option<usize>) -> Result<()> {
        let (l, d) = x.dims2()?;
        if d != self.n_features {
            return Err(Error::usage(format!(
                "window has {d} features, model was built for {}",
                self.n_features
            )));
        }
        if let Some(want) = expect_len {
            if l != want {
                return Err(Error::usage(format!("window length {l}, model expects {want}")));
            }
        }
        Ok(())
    }

    // ---- tape-level building blocks ------------------------------------

    pub fn embed_on(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let (l, _) = pass.tape.value(x).dims2()?;
        let e = pass.tape.matmul(x, pass.p(self.layout.embed))?;
        let pe = pass.tape.constant(positional_encoding(l, self.config.d_model));
        pass.tape.add(e, pe)
    }

    fn encoder_layer(&self, pass: &mut Pass<'_>, x: Var, layer: &EncLayer) -> Result<Var> {
        let c = &self.config;
        let a = multi_head(
            pass.tape,
            pass.vars,
            &layer.attn,
            x,
            x,
            c.n_heads,
            c.attention,
            c.importance_factor,
            false,
        )?;
        let x = pass.residual(x, a, &layer.ln1, c.dropout)?;
        let f = pass.ffn(x, &layer.ffn)?;
        let x = pass.residual(x, f, &layer.ln2, c.dropout)?;
        match layer.conv {
            Some((w, b)) => {
                let y = pass.tape.conv1d(x, pass.p(w), pass.p(b), 1, 1)?;
                let y = pass.tape.elu(y);
                pass.tape.max_pool1d(y, 3, 2, 1)
            }
            None => Ok(x),
        }
    }

    /// Encoder over an embedded sequence; returns memory and layer lengths.
    pub fn encode_on(&self, pass: &mut Pass<'_>, x: Var) -> Result<(Var, Vec<usize>)> {
        let mut h = self.embed_on(pass, x)?;
        let mut lengths = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            lengths.push(pass.tape.value(h).rows());
            h = self.encoder_layer(pass, h, layer)?;
        }
        Ok((pass.ln(h, &self.layout.enc_norm)?, lengths))
    }

    /// Decoder over a `S×1` seed; returns the last `take` outputs as `take×1`.
    pub fn decode_on(&self, pass: &mut Pass<'_>, memory: Var, seed: Var, take: usize) -> Result<Var> {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        let s = pass.tape.value(seed).rows();
        let e = pass.tape.matmul(seed, pass.p(self.layout.dec_embed))?;
        let pe = pass.tape.constant(positional_encoding(s, c.d_model));
        let mut h = pass.tape.add(e, pe)?;
        for layer in &self.layout.dec {
            let a = multi_head(
                pass.tape,
                pass.vars,
                &layer.self_attn,
                h,
                h,
                c.n_heads,
                AttentionKind::Full,
                c.importance_factor,
                true,
            )?;
            h = pass.residual(h, a, &layer.ln1, c.dropout)?;
            let a = multi_head(
                pass.tape,
                pass.vars,
                &layer.cross,
                h,
                memory,
                c.n_heads,
                AttentionKind::Full,
                c.importance_factor,
                false,
            )?;
            h = pass.residual(h, a, &layer.ln2, c.dropout)?;
            let f = pass.ffn(h, &layer.ffn)?;
            h = pass.residual(h, f, &layer.ln3, c.dropout)?;
        }
        let h = pass.ln(h, &self.layout.dec_norm)?;
        let tail = pass.tape.slice_rows(h, s - take, take)?;
        let y = pass.tape.matmul(tail, pass.p(self.layout.out_w))?;
        pass.tape.add_row(y, pass.p(self.layout.out_b))
    }

    /// Full forward pass on the tape; returns `H×1` predictions.
    pub fn forward_on(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let label = self.label_of(pass.tape.value(x));
        let (memory, _) = self.encode_on(pass, x)?;
        let seed = pass.tape.constant(self.seed_tensor(&label, self.config.horizon));
        self.decode_on(pass, memory, seed, self.config.horizon)
    }

    // ---- tensor-level API -----------------------------------------------

    /// Last `label_len` target values of a window.
    pub fn label_of(&self, x: &Tensor) -> Vec<f64> {
        let l = x.rows();
        (l.saturating_sub(self.config.label_len)..l)
            .map(|r| x.row(r)[self.target_index])
            .collect()
    }

    fn seed_tensor(&self, label: &[f64], placeholders: usize) -> Tensor {
        let mut v = label.to_vec();
        v.resize(label.len() + placeholders, 0.0);
        Tensor::matrix(v.len(), 1, v)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_window(x, None)?;
        let mut tape = Tape::new();
        let vars = self.frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let mut pass = Pass {
            tape: &mut tape,
            vars: &vars,
            rng: None,
        };
        let e = self.embed_on(&mut pass, xv)?;
        Ok(tape.value(e).clone())
    }

    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutput> {
        self.encode_profiled(x).map(|(o, _)| o)
    }

    /// Encoder output plus the activation element count recorded on the
    /// tape (parameters excluded).
    pub fn encode_profiled(&self, x: &Tensor) -> Result<(EncoderOutput, usize)> {
        self.check_window(x, Some(self.config.input_len))?;
        let mut tape = Tape::new();
        let vars = self.frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let mut pass = Pass {
            tape: &mut tape,
            vars: &vars,
            rng: None,
        };
        let (m, lengths) = self.encode_on(&mut pass, xv)?;
        let activations = tape.live_elements() - self.params.element_count() - x.len();
        Ok((
            EncoderOutput {
                memory: tape.value(m).clone(),
                lengths,
            },
            activations,
        ))
    }

    /// Emits all `placeholders` forecast steps in one decoder pass.
    pub fn generative_decode(&self, enc: &EncoderOutput, label: &[f64], placeholders: usize) -> Result<Vec<f64>> {
        if placeholders != self.config.horizon {
            return Err(Error::usage(format!(
                "decoder seed has {placeholders} placeholders, horizon is {}",
                self.config.horizon
            )));
        }
        if label.len() != self.config.label_len {
            return Err(Error::usage(format!(
                "decoder label has {} values, label_len is {}",
                label.len(),
                self.config.label_len
            )));
        }
        self.decode_tensor(enc, &self.seed_tensor(label, placeholders), placeholders)
    }

    fn decode_tensor(&self, enc: &EncoderOutput, seed: &Tensor, take: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.frozen(&mut tape);
        let mem = tape.constant(enc.memory.clone());
        let seed = tape.constant(seed.clone());
        let mut pass = Pass {
            tape: &mut tape,
            vars: &vars,
            rng: None,
        };
        let y = self.decode_on(&mut pass, mem, seed, take)?;
        Ok(tape.value(y).values().to_vec())
    }

    /// Step-by-step reference decoder: one pass per horizon step, each
    /// feeding the previous predictions back in.
    pub fn reference_step_decode(&self, enc: &EncoderOutput, label: &[f64]) -> Result<Vec<f64>> {
        let mut known = label.to_vec();
        for _ in 0..self.config.horizon {
            let y = self.decode_tensor(enc, &self.seed_tensor(&known, 1), 1)?;
            known.push(y[0]);
        }
        Ok(known.split_off(label.len()))
    }

    /// Standardized `H`-step forecast for one `L×d` window.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        let enc = self.encode(x)?;
        self.generative_decode(&enc, &self.label_of(x), self.config.horizon)
    }
}

impl Objective for DatModel {
    type Sample = WindowSample;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn sample_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sample: &WindowSample,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        self.check_window(&sample.input, Some(self.config.input_len))?;
        if sample.target.len() != self.config.horizon {
            return Err(Error::usage(format!(
                "target has {} steps, horizon is {}",
                sample.target.len(),
                self.config.horizon
            )));
        }
        let x = tape.constant(sample.input.clone());
        let mut pass = Pass { tape, vars, rng };
        let pred = self.forward_on(&mut pass, x)?;
        let y = pass
            .tape
            .constant(Tensor::matrix(self.config.horizon, 1, sample.target.clone()));
        pass.tape.mse(pred, y)
    }
}
