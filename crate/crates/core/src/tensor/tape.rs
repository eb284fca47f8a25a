use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Elu(Var),
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    AssembleRows {
        fill: Var,
        rows: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    CausalMask(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and a reverse sweep is a valid topological order.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    scratch_elements: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            scratch_elements: 0,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers every parameter of `store` as a gradient-tracked leaf.
    /// The returned vector is indexed by [`ParamId`].
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        store.tensors().map(|t| self.leaf(t.clone(), true)).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` for untracked values or
    /// before `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects gradients for bound parameters in store order.
    pub fn param_grads(&self, bound: &[Var]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .map(|&v| {
                self.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(v).len()])
            })
            .collect()
    }

    /// Total elements held by recorded values plus declared scratch space.
    /// Nothing is freed before the tape drops, so this is also the peak.
    pub fn live_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum::<usize>() + self.scratch_elements
    }

    pub(crate) fn note_scratch(&mut self, elements: usize) {
        self.scratch_elements += elements;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        t.dims2().map_err(|_| Error::dimension(op, t.shape(), &[0, 0]))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dimension("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dimension(
                "matmul_nt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dimension(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::dimension(
                "add_row",
                self.value(a).shape(),
                self.value(row).shape(),
            ));
        }
        let av = self.value(a).values();
        let rv = self.value(row).values();
        let mut out = av.to_vec();
        for r in out.chunks_exact_mut(n) {
            for (o, b) in r.iter_mut().zip(rv) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Dropout { x, mask },
            rg,
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of an `m×n` matrix as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mean_rows")?;
        let mut out = vec![0.0; n];
        for r in self.value(x).values().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(1, n, out), Op::MeanRows(x), rg))
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.values().iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax input contains NaN"));
        }
        let n = t.last_dim();
        let mut out = t.values().to_vec();
        for r in out.chunks_exact_mut(n) {
            softmax_in_place(r);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Last-axis layer normalization with `1e-5` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dimension("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for (r, xs) in t.values().chunks_exact(d).enumerate() {
            let mu = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xs[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- temporal ops ---------------------------------------------------

    /// 1-D convolution over rows of `x: L×c_in`.
    ///
    /// `weight` has shape `[kernel, c_in, c_out]`, `bias` has `c_out`
    /// entries. `pad` zero rows are added on each side.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (l, cin) = self.dims(x, "conv1d")?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 3 || ws[1] != cin || self.value(bias).len() != ws[2] || stride == 0 {
            return Err(Error::dimension("conv1d", self.value(x).shape(), &ws));
        }
        let (k, cout) = (ws[0], ws[2]);
        if k > l + 2 * pad {
            return Err(Error::dimension("conv1d", &[l, cin], &ws));
        }
        let lout = conv_out_len(l, k, stride, pad);
        let xv = self.value(x).values();
        let wv = self.value(weight).values();
        let bv = self.value(bias).values();
        let mut out = vec![0.0; lout * cout];
        for t in 0..lout {
            let orow = &mut out[t * cout..(t + 1) * cout];
            orow.copy_from_slice(bv);
            for j in 0..k {
                let src = (t * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= l {
                    continue;
                }
                let xrow = &xv[src as usize * cin..(src as usize + 1) * cin];
                for (c, &xval) in xrow.iter().enumerate() {
                    let wrow = &wv[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                    axpy(xval, wrow, orow);
                }
            }
        }
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            Tensor::matrix(lout, cout, out),
            Op::Conv1d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Max pooling over rows with implicit `-inf` padding.
    pub fn max_pool1d(&mut self, x: Var, width: usize, stride: usize, pad: usize) -> Result<Var> {
        let (l, d) = self.dims(x, "max_pool1d")?;
        if width == 0 || stride == 0 || width > l + 2 * pad || pad >= width {
            return Err(Error::dimension("max_pool1d", &[l, d], &[width, stride, pad]));
        }
        let lout = conv_out_len(l, width, stride, pad);
        let xv = self.value(x).values();
        let mut out = vec![f64::NEG_INFINITY; lout * d];
        let mut argmax = vec![usize::MAX; lout * d];
        for t in 0..lout {
            for j in 0..width {
                let src = (t * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= l {
                    continue;
                }
                let s = src as usize;
                for c in 0..d {
                    let v = xv[s * d + c];
                    if v > out[t * d + c] || argmax[t * d + c] == usize::MAX {
                        out[t * d + c] = v;
                        argmax[t * d + c] = s * d + c;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(lout, d, out), Op::MaxPool1d { x, argmax }, rg))
    }

    // ---- structural -----------------------------------------------------

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dimension("slice_rows", &[m, n], &[start, len]));
        }
        let out = self.value(x).values()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(len, n, out), Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dimension("slice_cols", &[m, n], &[start, len]));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(m * len);
        for r in xv.chunks_exact(n) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::usage("concat of nothing"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dimension("concat_cols", &[m], &[pm]));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::dimension("gather_rows", &[m, n], idx));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Builds a `total×n` matrix whose row `idx[k]` is `rows[k]` and whose
    /// remaining rows all copy the single row of `fill`.
    pub fn assemble_rows(&mut self, fill: Var, rows: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (fm, n) = self.dims(fill, "assemble_rows")?;
        let (rm, rn) = self.dims(rows, "assemble_rows")?;
        if fm != 1 || rn != n || rm != idx.len() || idx.iter().any(|&i| i >= total) {
            return Err(Error::dimension("assemble_rows", &[fm, n], &[rm, rn]));
        }
        let fv = self.value(fill).values();
        let rv = self.value(rows).values();
        let mut out = Vec::with_capacity(total * n);
        for _ in 0..total {
            out.extend_from_slice(fv);
        }
        for (k, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&rv[k * n..(k + 1) * n]);
        }
        let rg = self.rg(&[fill, rows]);
        Ok(self.push(
            Tensor::matrix(total, n, out),
            Op::AssembleRows {
                fill,
                rows,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "causal_mask")?;
        if m != n {
            return Err(Error::dimension("causal_mask", &[m, n], &[n, n]));
        }
        let mut out = self.value(x).values().to_vec();
        for i in 0..m {
            for v in &mut out[i * n + i + 1..(i + 1) * n] {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::CausalMask(x), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every tracked value.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::usage("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.values();
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulator for an input; allocated on first touch.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len = |v: Var| self.nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("2d");
                let n = node.value.last_dim();
                if tracked(a) {
                    let bv = val(b);
                    let ga = acc(grads, a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if tracked(b) {
                    let av = val(a);
                    let gb = acc(grads, b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            axpy(av[r * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("2d");
                let n = node.value.last_dim();
                if tracked(a) {
                    let bv = val(b);
                    let ga = acc(grads, a, m * k);
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &bv[j * k..(j + 1) * k], &mut ga[r * k..(r + 1) * k]);
                        }
                    }
                }
                if tracked(b) {
                    let av = val(a);
                    let gb = acc(grads, b, n * k);
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &av[r * k..(r + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if tracked(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if tracked(a) {
                    add_into(acc(grads, a, g.len()), g);
                }
                if tracked(b) {
                    for (o, x) in acc(grads, b, g.len()).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if tracked(v) {
                        let ov = val(other);
                        let gv = acc(grads, v, g.len());
                        for ((o, x), y) in gv.iter_mut().zip(g).zip(ov) {
                            *o += x * y;
                        }
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if tracked(a) {
                    add_into(acc(grads, a, g.len()), g);
                }
                if tracked(row) {
                    let n = len(row);
                    let gr = acc(grads, row, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if tracked(x) {
                    for (o, v) in acc(grads, x, g.len()).iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            &Op::Sum(x) => {
                if tracked(x) {
                    let n = len(x);
                    acc(grads, x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(x) => {
                if tracked(x) {
                    let n = len(x);
                    let s = g[0] / n as f64;
                    acc(grads, x, n).iter_mut().for_each(|o| *o += s);
                }
            }
            &Op::MeanRows(x) => {
                if tracked(x) {
                    let n = g.len();
                    let m = len(x) / n;
                    let gx = acc(grads, x, m * n);
                    for r in gx.chunks_exact_mut(n) {
                        for (o, v) in r.iter_mut().zip(g) {
                            *o += v / m as f64;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if tracked(x) {
                    let y = node.value.values();
                    let n = node.value.last_dim();
                    let gx = acc(grads, x, y.len());
                    for ((yr, gr), or) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            or[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gain);
                if tracked(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (hr, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += hr[j] * gr[j];
                        }
                    }
                }
                if tracked(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                }
                if tracked(*x) {
                    let gx = acc(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (hr, gr)) in xhat.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dot(&dh, hr) / d as f64;
                        let or = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            or[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if tracked(x) {
                    let xv = val(x);
                    let gx = acc(grads, x, g.len());
                    for ((o, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        let inner = GELU_C * (v + GELU_A * v * v * v);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * d;
                    }
                }
            }
            &Op::Elu(x) => {
                if tracked(x) {
                    let xv = val(x);
                    let y = node.value.values();
                    let gx = acc(grads, x, g.len());
                    for i in 0..g.len() {
                        let d = if xv[i] > 0.0 { 1.0 } else { y[i] + 1.0 };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if tracked(*x) {
                    for ((o, gi), m) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            &Op::Conv1d {
                x,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (l, cin) = self.nodes[x.0].value.dims2().expect("2d");
                let ws = self.nodes[weight.0].value.shape();
                let (k, cout) = (ws[0], ws[2]);
                let lout = node.value.rows();
                if tracked(bias) {
                    let gb = acc(grads, bias, cout);
                    for gr in g.chunks_exact(cout) {
                        add_into(gb, gr);
                    }
                }
                let xv = val(x);
                let wv = val(weight);
                let src_row = |t: usize, j: usize| -> Option<usize> {
                    let s = (t * stride + j) as isize - pad as isize;
                    (s >= 0 && (s as usize) < l).then_some(s as usize)
                };
                if tracked(weight) {
                    let gw = acc(grads, weight, k * cin * cout);
                    for t in 0..lout {
                        let gr = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let Some(s) = src_row(t, j) else { continue };
                            for c in 0..cin {
                                let base = (j * cin + c) * cout;
                                axpy(xv[s * cin + c], gr, &mut gw[base..base + cout]);
                            }
                        }
                    }
                }
                if tracked(x) {
                    let gx = acc(grads, x, l * cin);
                    for t in 0..lout {
                        let gr = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let Some(s) = src_row(t, j) else { continue };
                            for c in 0..cin {
                                let base = (j * cin + c) * cout;
                                gx[s * cin + c] += dot(gr, &wv[base..base + cout]);
                            }
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if tracked(*x) {
                    let gx = acc(grads, *x, len(*x));
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if tracked(x) {
                    let n = node.value.last_dim();
                    let gx = acc(grads, x, len(x));
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            &Op::SliceCols { x, start } => {
                if tracked(x) {
                    let w = node.value.last_dim();
                    let n = self.nodes[x.0].value.last_dim();
                    let gx = acc(grads, x, len(x));
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + w], gr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if tracked(p) {
                        let gp = acc(grads, p, len(p));
                        for (r, gr) in g.chunks_exact(n).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &gr[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                if tracked(*x) {
                    let n = node.value.last_dim();
                    let gx = acc(grads, *x, len(*x));
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::AssembleRows { fill, rows, idx } => {
                let n = node.value.last_dim();
                let total = node.value.rows();
                if tracked(*rows) {
                    let gr = acc(grads, *rows, len(*rows));
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gr[k * n..(k + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
                if tracked(*fill) {
                    let mut selected = vec![false; total];
                    for &i in idx {
                        selected[i] = true;
                    }
                    let gf = acc(grads, *fill, n);
                    for (r, gr) in g.chunks_exact(n).enumerate() {
                        if !selected[r] {
                            add_into(gf, gr);
                        }
                    }
                }
            }
            &Op::CausalMask(x) => {
                if tracked(x) {
                    let n = node.value.last_dim();
                    let gx = acc(grads, x, g.len());
                    for r in 0..n {
                        add_into(&mut gx[r * n..r * n + r + 1], &g[r * n..r * n + r + 1]);
                    }
                }
            }
        }
    }
}

impl std::ops::Index<ParamId> for [Var] {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self[id.index()]
    }
}

pub(crate) fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
    out
}

pub(crate) fn softmax_in_place(r: &mut [f64]) {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in r.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in r.iter_mut() {
        *v /= s;
    }
}
