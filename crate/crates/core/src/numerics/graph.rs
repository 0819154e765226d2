//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together
//! with the forward value. Forward values come from [`super::kernels`], so
//! a graph built with gradients disabled computes exactly what the kernels
//! compute; the streaming engine relies on that.

use std::rc::Rc;

use crate::ctc;
use crate::error::{dim_err, Error, Result};
use crate::numerics::kernels::{self, BoolMatrix};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T: Scalar> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Swish(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, keep: Vec<T> },
    CausalConv { x: Var, kernel: Var, history: Var },
    RelBias { table: Var, row: usize, idx: Rc<Vec<usize>> },
    Sum(Var),
    Ctc { x: Var, grad: Vec<f64> },
}

struct Node<T: Scalar> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Vec<T>>> {
        self.params
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    dropout_rng: Option<Rng>,
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, delta: &[T]) {
    match slot {
        Some(g) => {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph that records for backpropagation into `params`.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    /// Forward-only graph; no node needs a gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(params);
        g.grad_enabled = false;
        g
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let y = kernels::add_row(self.value(a), self.value(bias))?;
        Ok(self.push(y, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let y = kernels::scale(self.value(a), s);
        Ok(self.push(y, Op::Scale(a, s), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let y = kernels::swish(self.value(a));
        Ok(self.push(y, Op::Swish(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = kernels::sigmoid(self.value(a));
        Ok(self.push(y, Op::Sigmoid(a), &[a]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let y = kernels::softmax(self.value(a))?;
        Ok(self.push(y, Op::Softmax(a), &[a]))
    }

    /// Row softmax over the positions allowed by `mask`; masked entries are
    /// exactly zero and receive no gradient.
    pub fn softmax_masked(&mut self, a: Var, mask: &BoolMatrix) -> Result<Var> {
        let y = kernels::softmax_masked(self.value(a), mask)?;
        Ok(self.push(y, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let y = kernels::log_softmax(self.value(a))?;
        Ok(self.push(y, Op::LogSoftmax(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = kernels::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_rows(&vals)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_cols(&vals)?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_rows(self.value(a), start, len)?;
        Ok(self.push(y, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_cols(self.value(a), start, len)?;
        Ok(self.push(y, Op::SliceCols(a, start), &[a]))
    }

    pub fn repeat_rows(&mut self, a: Var, factor: usize) -> Result<Var> {
        let y = kernels::repeat_rows(self.value(a), factor)?;
        Ok(self.push(y, Op::RepeatRows(a, factor), &[a]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let y = kernels::embedding(self.value(table), ids)?;
        Ok(self.push(y, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Inverted dropout; identity when the graph has no dropout generator.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be below 1")));
        }
        let n = match &self.nodes[a.0].value {
            Value::Owned(t) => t.len(),
            Value::Param(id) => self.params.get(*id).len(),
        };
        let s = T::from_f64_lossy(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..n).map(|_| if rng.bernoulli(p) { T::zero() } else { s }).collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let y = Tensor::from_matrix(x.rows(), x.cols(), data);
        Ok(self.push(y, Op::Dropout { x: a, keep }, &[a]))
    }

    pub fn causal_conv(&mut self, x: Var, kernel: Var, history: Var) -> Result<Var> {
        let (y, _) = kernels::causal_conv1d(self.value(x), self.value(kernel), self.value(history))?;
        Ok(self.push(y, Op::CausalConv { x, kernel, history }, &[x, kernel, history]))
    }

    /// Gathers `table[row][idx[i * cols + j]]` into a `rows x cols` matrix.
    pub fn rel_bias(
        &mut self,
        table: Var,
        row: usize,
        idx: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let t = self.value(table);
        let (tr, tc) = t.dims2()?;
        if row >= tr || idx.len() != rows * cols || idx.iter().any(|&i| i >= tc) {
            return Err(dim_err!("relative bias gather out of range"));
        }
        let src = t.row(row);
        let y = Tensor::from_matrix(rows, cols, idx.iter().map(|&i| src[i]).collect());
        Ok(self.push(y, Op::RelBias { table, row, idx }, &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// CTC negative log-likelihood of `target` under frame log-probabilities
    /// `log_probs` (frames x vocab). Infeasible targets yield `clamp` with a
    /// zero gradient when a clamp is given, `+inf` otherwise.
    pub fn ctc_loss(
        &mut self,
        log_probs: Var,
        target: &[usize],
        blank: usize,
        clamp: Option<f64>,
    ) -> Result<Var> {
        let lp = self.value(log_probs);
        let (frames, vocab) = lp.dims2()?;
        let lp64 = lp.to_f64_vec();
        let out = ctc::ctc_loss_raw(&lp64, frames, vocab, target, blank)?;
        let (loss, grad) = if out.loss.is_finite() {
            (out.loss, out.grad)
        } else {
            (clamp.unwrap_or(f64::INFINITY), vec![0.0; frames * vocab])
        };
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::Ctc { x: log_probs, grad },
            &[log_probs],
        ))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(dim_err!("backward needs a scalar root, got {:?}", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params: Vec<Option<Vec<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (pi, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                params[pi] = grads[v.0].clone();
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = self.value(Var(i));
        let (orows, ocols) = (out.rows(), out.cols());
        let gt = || Tensor::from_matrix(orows, ocols, g.to_vec());
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = kernels::matmul_bt(&gt(), self.value(*b))?;
                    add_into(&mut grads[a.0], ga.data());
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_at(self.value(*a), &gt())?;
                    add_into(&mut grads[b.0], gb.data());
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    let ga = kernels::matmul(&gt(), self.value(*b))?;
                    add_into(&mut grads[a.0], ga.data());
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_at(&gt(), self.value(*a))?;
                    add_into(&mut grads[b.0], gb.data());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); ocols];
                    for row in g.chunks(ocols.max(1)) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga: Vec<T> = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let gb: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<T> = g.iter().map(|&x| x * *s).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = ocols;
                let n = T::from_usize(c).unwrap();
                let gam = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..orows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_gh = T::zero();
                        let mut sum_ghx = T::zero();
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            sum_gh = sum_gh + gh;
                            sum_ghx = sum_ghx + gh * hr[j];
                        }
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            gx[r * c + j] = rstd[r] / n * (n * gh - sum_gh - hr[j] * sum_ghx);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (k, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % c] = gg[k % c] + gv * h;
                    }
                    add_into(&mut grads[gamma.0], &gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![T::zero(); c];
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % c] = gb[k % c] + gv;
                    }
                    add_into(&mut grads[beta.0], &gb);
                }
            }
            Op::Swish(a) => {
                let xs = self.value(*a).data();
                let ga: Vec<T> = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &x)| {
                        let s = kernels::sigmoid_scalar(x);
                        gv * (s + x * s * (T::one() - s))
                    })
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ys = out.data();
                let ga: Vec<T> = g.iter().zip(ys).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Softmax(a) => {
                let ys = out.data();
                let mut ga = vec![T::zero(); g.len()];
                for r in 0..orows {
                    let s = r * ocols;
                    let dotv = (s..s + ocols).fold(T::zero(), |acc, k| acc + g[k] * ys[k]);
                    for k in s..s + ocols {
                        ga[k] = ys[k] * (g[k] - dotv);
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::LogSoftmax(a) => {
                let ys = out.data();
                let mut ga = vec![T::zero(); g.len()];
                for r in 0..orows {
                    let s = r * ocols;
                    let gsum = (s..s + ocols).fold(T::zero(), |acc, k| acc + g[k]);
                    for k in s..s + ocols {
                        ga[k] = g[k] - ys[k].exp() * gsum;
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::Transpose(a) => {
                let ga = kernels::transpose(&gt())?;
                add_into(&mut grads[a.0], ga.data());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.wants(*p) {
                        let part = kernels::slice_cols(&gt(), col, pc)?;
                        add_into(&mut grads[p.0], part.data());
                    }
                    col += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut ga = vec![T::zero(); src.len()];
                let c = src.cols();
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                add_into(&mut grads[a.0], &ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![T::zero(); src.len()];
                for r in 0..orows {
                    ga[r * c + start..r * c + start + ocols]
                        .copy_from_slice(&g[r * ocols..(r + 1) * ocols]);
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::RepeatRows(a, factor) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![T::zero(); src.len()];
                for (r, row) in g.chunks(c.max(1)).enumerate() {
                    let dst = &mut ga[(r / factor) * c..(r / factor + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::Embedding { table, ids } => {
                let src = self.value(*table);
                let c = src.cols();
                let mut gt_ = vec![T::zero(); src.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt_[id * c..(id + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d = *d + v;
                    }
                }
                add_into(&mut grads[table.0], &gt_);
            }
            Op::Dropout { x, keep } => {
                let gx: Vec<T> = g.iter().zip(keep).map(|(&a, &k)| a * k).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::CausalConv { x, kernel, history } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let hv = self.value(*history);
                let (frames, ch) = (xv.rows(), xv.cols());
                let k = kv.rows();
                let h = k - 1;
                let ext = if h == 0 { xv.clone() } else { kernels::concat_rows(&[hv, xv])? };
                let mut gext = vec![T::zero(); ext.len()];
                let mut gk = vec![T::zero(); kv.len()];
                for t in 0..frames {
                    let grow = &g[t * ch..(t + 1) * ch];
                    for i in 0..k {
                        let xrow = ext.row(t + i);
                        let krow = kv.row(i);
                        for c in 0..ch {
                            gext[(t + i) * ch + c] = gext[(t + i) * ch + c] + krow[c] * grow[c];
                            gk[i * ch + c] = gk[i * ch + c] + xrow[c] * grow[c];
                        }
                    }
                }
                if self.wants(*history) && h > 0 {
                    add_into(&mut grads[history.0], &gext[..h * ch]);
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], &gext[h * ch..]);
                }
                if self.wants(*kernel) {
                    add_into(&mut grads[kernel.0], &gk);
                }
            }
            Op::RelBias { table, row, idx } => {
                let tv = self.value(*table);
                let tc = tv.cols();
                let mut gt_ = vec![T::zero(); tv.len()];
                for (&ix, &gv) in idx.iter().zip(g) {
                    gt_[row * tc + ix] = gt_[row * tc + ix] + gv;
                }
                add_into(&mut grads[table.0], &gt_);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                add_into(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::Ctc { x, grad } => {
                let gx: Vec<T> = grad.iter().map(|&v| T::from_f64_lossy(v) * g[0]).collect();
                add_into(&mut grads[x.0], &gx);
            }
        }
        Ok(())
    }
}
