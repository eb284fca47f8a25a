use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::dot;
use crate::tensor::{ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Exact attention only for the highest-scoring queries.
    #[default]
    Importance,
    /// Exact softmax attention for every query.
    Full,
}

/// Number of queries that receive exact attention: `min(L, max(1, ⌈c·ln L⌉))`.
pub fn kept_queries(l: usize, factor: f64) -> usize {
    let u = (factor * (l as f64).ln()).ceil();
    (u.max(1.0) as usize).min(l)
}

/// Keys sampled per query when scoring: `min(L_k, max(1, ⌈5·ln L_k⌉))`.
pub fn sampled_keys(lk: usize) -> usize {
    kept_queries(lk, 5.0)
}

/// Max-minus-mean of raw dot products over a sampled key subset.
///
/// Keys are drawn with replacement from a generator seeded by the two
/// lengths, so the score is a pure function of its inputs.
pub fn importance_scores(q: &[f64], k: &[f64], lq: usize, lk: usize, dh: usize) -> Vec<f64> {
    let s = sampled_keys(lk);
    let mut rng = SeededRng::seed_from_u64(((lq as u64) << 32) ^ lk as u64);
    (0..lq)
        .map(|i| {
            let qi = &q[i * dh..(i + 1) * dh];
            let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
            for _ in 0..s {
                let j = rng.random_range(0..lk);
                let v = dot(qi, &k[j * dh..(j + 1) * dh]);
                max = max.max(v);
                sum += v;
            }
            max - sum / s as f64
        })
        .collect()
}

/// Indices of the `u` largest scores in ascending index order. Ties go to
/// the lower index.
pub fn select_queries(scores: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(u);
    order.sort_unstable();
    order
}

/// Single-head attention on the tape. `q: Lq×dh`, `k, v: Lk×dh`.
pub(crate) fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    kind: AttentionKind,
    factor: f64,
    causal: bool,
) -> Result<Var> {
    let (lq, dh) = tape.value(q).dims2()?;
    let lk = tape.value(k).rows();
    let inv = 1.0 / (dh as f64).sqrt();
    let u = kept_queries(lq, factor);
    if kind == AttentionKind::Full || causal || u >= lq {
        let s = tape.matmul_nt(q, k)?;
        let mut s = tape.scale(s, inv);
        if causal {
            s = tape.causal_mask(s)?;
        }
        let a = tape.softmax(s)?;
        return tape.matmul(a, v);
    }
    let scores = importance_scores(tape.value(q).values(), tape.value(k).values(), lq, lk, dh);
    tape.note_scratch(lq * sampled_keys(lk));
    let idx = select_queries(&scores, u);
    let qs = tape.gather_rows(q, &idx)?;
    let s = tape.matmul_nt(qs, k)?;
    let s = tape.scale(s, inv);
    let a = tape.softmax(s)?;
    let rows = tape.matmul(a, v)?;
    let fill = tape.mean_rows(v)?;
    tape.assemble_rows(fill, rows, &idx, lq)
}

/// Tape-free single-head attention, mainly for inspection and tests.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, kind: AttentionKind, factor: f64) -> Result<Tensor> {
    let (_, dq) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    let (lv, _) = v.dims2()?;
    if dq != dk || lk != lv {
        return Err(Error::dimension("attention", q.shape(), k.shape()));
    }
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = attend(&mut tape, q, k, v, kind, factor, false)?;
    Ok(tape.value(out).clone())
}

/// Query/key/value/output projections with biases.
#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttnIds {
    pub(crate) fn declare(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeededRng) -> Self {
        let mut w = |n: &str| p.add_glorot(&format!("{prefix}.w{n}"), &[d, d], rng);
        let (wq, wk, wv, wo) = (w("q"), w("k"), w("v"), w("o"));
        let mut b = |n: &str| p.add_const(&format!("{prefix}.b{n}"), &[d], 0.0);
        AttnIds {
            wq,
            bq: b("q"),
            wk,
            bk: b("k"),
            wv,
            bv: b("v"),
            wo,
            bo: b("o"),
        }
    }
}

/// Head-split attention over query source `xq` and key/value source `xkv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head(
    tape: &mut Tape,
    vars: &[Var],
    ids: &AttnIds,
    xq: Var,
    xkv: Var,
    n_heads: usize,
    kind: AttentionKind,
    factor: f64,
    causal: bool,
) -> Result<Var> {
    let proj = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
        let y = tape.matmul(x, vars[w.index()])?;
        tape.add_row(y, vars[b.index()])
    };
    let q = proj(tape, xq, ids.wq, ids.bq)?;
    let k = proj(tape, xkv, ids.wk, ids.bk)?;
    let v = proj(tape, xkv, ids.wv, ids.bv)?;
    let d = tape.value(q).last_dim();
    let dh = d / n_heads;
    let merged = if n_heads == 1 {
        attend(tape, q, k, v, kind, factor, causal)?
    } else {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            heads.push(attend(tape, qh, kh, vh, kind, factor, causal)?);
        }
        tape.concat_cols(&heads)?
    };
    proj(tape, merged, ids.wo, ids.bo)
}
