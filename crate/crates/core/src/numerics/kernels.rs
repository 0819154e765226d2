//! Forward kernels on rank-2 tensors.
//!
//! Every kernel computes each output row from the corresponding input rows
//! only, with a fixed accumulation order. Evaluating a subset of rows
//! therefore yields bit-identical values to evaluating the whole matrix,
//! which is what lets the streaming engine reproduce offline outputs exactly.

use crate::error::{dim_err, Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense boolean matrix (row-major), used for attention masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Boolean matrix product: `out[i][j] = OR_k self[i][k] AND other[k][j]`.
    pub fn compose(&self, other: &BoolMatrix) -> Result<BoolMatrix> {
        if self.cols != other.rows {
            return Err(dim_err!(
                "boolean product {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = BoolMatrix::new(self.rows, other.cols, false);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if !self.get(i, k) {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d |= s;
                }
            }
        }
        Ok(out)
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    let da = a.dims2()?;
    let db = b.dims2()?;
    if da != db {
        return Err(dim_err!("{what}: {da:?} vs {db:?}"));
    }
    Ok(da)
}

/// `a (m x k) * b (k x n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions {m}x{k} by {k2}x{n}"));
    }
    let mut c = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    Ok(Tensor::from_matrix(m, n, c))
}

/// `a (m x k) * b^T` where `b` is `n x k`. Accumulates in the same order
/// as [`matmul`], so each entry depends only on its row of `a` and column
/// of the product.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul_bt inner dimensions {m}x{k} by ({n}x{k2})^T"));
    }
    matmul(a, &transpose(b)?)
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul_at inner dimensions ({k}x{m})^T by {k2}x{n}"));
    }
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = b.row(p);
        for (i, &av) in a.row(p).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    Ok(Tensor::from_matrix(m, n, c))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = check_same(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_matrix(r, c, data))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = check_same(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_matrix(r, c, data))
}

/// Adds a `1 x n` row vector to every row of `a`.
pub fn add_row<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    if bias.dims2()? != (1, c) {
        return Err(dim_err!("add_row: bias {:?} for {r}x{c}", bias.shape()));
    }
    let b = bias.data();
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(c.max(1)) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v = *v + bv;
        }
    }
    Ok(Tensor::from_matrix(r, c, data))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let (r, c) = (a.rows(), a.cols());
    Tensor::from_matrix(r, c, a.data().iter().map(|&x| x * s).collect())
}

pub fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_matrix(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect())
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    map(a, sigmoid_scalar)
}

pub fn swish<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    map(a, |x| x * sigmoid_scalar(x))
}

/// Row-wise layer normalization. Returns `(y, xhat, rstd)`; the last two are
/// kept by the autodiff tape.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (r, c) = x.dims2()?;
    if gamma.dims2()? != (1, c) || beta.dims2()? != (1, c) {
        return Err(dim_err!("layer_norm parameters must be 1x{c}"));
    }
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let n = T::from_usize(c).unwrap();
    let mut y = vec![T::zero(); r * c];
    let mut xhat = vec![T::zero(); r * c];
    let mut rstd = vec![T::zero(); r];
    let (g, b) = (gamma.data(), beta.data());
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[i] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[i * c + j] = h;
            y[i * c + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::from_matrix(r, c, y), xhat, rstd))
}

/// Softmax of one row restricted to the positions where `mask` is true.
/// Masked positions get exactly zero.
pub fn softmax_masked_row<T: Scalar>(scores: &[T], mask: &[bool], out: &mut [T]) -> Result<()> {
    if scores.len() != mask.len() || out.len() != scores.len() {
        return Err(dim_err!("softmax row of {} with mask of {}", scores.len(), mask.len()));
    }
    let mut max = T::neg_infinity();
    let mut any = false;
    for (&s, &m) in scores.iter().zip(mask) {
        if m {
            any = true;
            if s > max {
                max = s;
            }
        }
    }
    if !any {
        return Err(Error::Contract("softmax row has every position masked".into()));
    }
    let mut sum = T::zero();
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        if m {
            let e = (s - max).exp();
            *o = e;
            sum = sum + e;
        } else {
            *o = T::zero();
        }
    }
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o = *o / sum;
        }
    }
    Ok(())
}

pub fn softmax_masked<T: Scalar>(scores: &Tensor<T>, mask: &BoolMatrix) -> Result<Tensor<T>> {
    let (r, c) = scores.dims2()?;
    if (mask.rows(), mask.cols()) != (r, c) {
        return Err(dim_err!("mask {}x{} for scores {r}x{c}", mask.rows(), mask.cols()));
    }
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        softmax_masked_row(scores.row(i), mask.row(i), &mut out[i * c..(i + 1) * c])?;
    }
    Ok(Tensor::from_matrix(r, c, out))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    softmax_masked(x, &BoolMatrix::new(r, c, true))
}

pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum.ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Ok(Tensor::from_matrix(r, c, out))
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.get(i, j);
        }
    }
    Ok(Tensor::from_matrix(c, r, out))
}

pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let cols = match parts.first() {
        Some(p) => p.dims2()?.1,
        None => return Err(dim_err!("concat of nothing")),
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != cols {
            return Err(dim_err!("concat_rows with {c} vs {cols} columns"));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_matrix(rows, cols, data))
}

pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = match parts.first() {
        Some(p) => p.dims2()?.0,
        None => return Err(dim_err!("concat of nothing")),
    };
    let mut cols = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(dim_err!("concat_cols with {r} vs {rows} rows"));
        }
        cols += c;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_matrix(rows, cols, data))
}

pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if start + len > r {
        return Err(dim_err!("row slice {start}..{} of {r} rows", start + len));
    }
    Ok(Tensor::from_matrix(len, c, x.data()[start * c..(start + len) * c].to_vec()))
}

pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if start + len > c {
        return Err(dim_err!("column slice {start}..{} of {c} columns", start + len));
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&x.row(i)[start..start + len]);
    }
    Ok(Tensor::from_matrix(r, len, data))
}

/// Repeats every row `factor` times, preserving order.
pub fn repeat_rows<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if factor == 0 {
        return Err(dim_err!("repeat factor must be at least 1"));
    }
    let mut data = Vec::with_capacity(r * c * factor);
    for i in 0..r {
        for _ in 0..factor {
            data.extend_from_slice(x.row(i));
        }
    }
    Ok(Tensor::from_matrix(r * factor, c, data))
}

pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = table.dims2()?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(dim_err!("embedding id {id} outside table of {v} rows"));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_matrix(ids.len(), d, data))
}

/// Depthwise causal convolution.
///
/// `input` is `frames x channels`, `kernel` is `k x channels`, `history`
/// holds the `k - 1` frames preceding `input`. Output frame `t` is
/// `sum_i kernel[i] * ext[t + i]` with `ext = history ++ input`, so the last
/// kernel tap multiplies the current frame. Returns the output and the
/// history for the next call.
pub fn causal_conv1d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    history: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (frames, ch) = input.dims2()?;
    let (k, kch) = kernel.dims2()?;
    if kch != ch || k == 0 {
        return Err(dim_err!("kernel {k}x{kch} for {ch} channels"));
    }
    let (h, hch) = history.dims2()?;
    if h != k - 1 || (h > 0 && hch != ch) {
        return Err(Error::State(format!(
            "convolution history must hold {} frames of {ch} channels, got {h}x{hch}",
            k - 1
        )));
    }
    let ext = if h == 0 {
        input.clone()
    } else {
        concat_rows(&[history, input])?
    };
    let mut out = vec![T::zero(); frames * ch];
    for t in 0..frames {
        let orow = &mut out[t * ch..(t + 1) * ch];
        for i in 0..k {
            let xrow = ext.row(t + i);
            let krow = kernel.row(i);
            for c in 0..ch {
                orow[c] = orow[c] + krow[c] * xrow[c];
            }
        }
    }
    let total = ext.rows();
    let new_history = slice_rows(&ext, total - h, h)?;
    Ok((Tensor::from_matrix(frames, ch, out), new_history))
}

/// Index table for a clipped relative-position bias: entry `(i, j)` is
/// `clamp(kpos[j] - qpos[i], -clip, clip) + clip`.
pub fn relative_offsets(qpos: &[usize], kpos: &[usize], clip: usize) -> Vec<usize> {
    let c = clip as isize;
    let mut idx = Vec::with_capacity(qpos.len() * kpos.len());
    for &q in qpos {
        for &k in kpos {
            let d = (k as isize - q as isize).clamp(-c, c);
            idx.push((d + c) as usize);
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = t(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &v).unwrap(), v);
        let r = matmul(&t(&[&[1.0, 2.0]]), &v).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matches!(matmul(&v, &v), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, -2.0]]);
        let bt = transpose(&b).unwrap();
        assert_eq!(matmul_bt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = transpose(&a).unwrap();
        assert_eq!(matmul_at(&a, &b).unwrap(), matmul(&at, &b).unwrap());
    }

    #[test]
    fn masked_softmax_examples() {
        let mut out = [0.0; 3];
        softmax_masked_row(&[0.0, 0.0, 0.0], &[true, true, false], &mut out).unwrap();
        assert_eq!(out, [0.5, 0.5, 0.0]);

        let mut one = [0.0];
        for x in [-1e9, -3.0, 0.0, 7.5, 1e9] {
            softmax_masked_row(&[x], &[true], &mut one).unwrap();
            assert_eq!(one, [1.0]);
        }

        softmax_masked_row(&[1.0, 2.0, 3.0], &[true; 3], &mut out).unwrap();
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        for (o, s) in out.iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((o - s.exp() / z).abs() < 1e-15);
        }

        let err = softmax_masked_row(&[1.0, 2.0], &[false, false], &mut [0.0; 2]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn masked_probabilities_are_exactly_zero() {
        let scores = t(&[&[1e3, -1e3, 5.0], &[0.1, 0.2, 0.3]]);
        let mut mask = BoolMatrix::new(2, 3, true);
        mask.set(0, 2, false);
        mask.set(1, 0, false);
        let p = softmax_masked(&scores, &mask).unwrap();
        assert_eq!(p.get(0, 2), 0.0);
        assert_eq!(p.get(1, 0), 0.0);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_conv_examples() {
        let x = t(&[&[1.0], &[2.0], &[3.0]]);
        let ident = t(&[&[1.0]]);
        let (y, h) = causal_conv1d(&x, &ident, &Tensor::zeros(0, 1)).unwrap();
        assert_eq!(y, x);
        assert_eq!(h.rows(), 0);

        let delta = t(&[&[0.0], &[1.0]]);
        let (y, _) = causal_conv1d(&x, &delta, &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(y, x);

        let box2 = t(&[&[1.0], &[1.0]]);
        let (y, h) = causal_conv1d(&x, &box2, &Tensor::zeros(1, 1)).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0]);
        assert_eq!(h.data(), &[3.0]);

        let bad = causal_conv1d(&x, &box2, &Tensor::zeros(2, 1));
        assert!(matches!(bad, Err(Error::State(_))));
    }

    #[test]
    fn chunked_conv_matches_whole_sequence() {
        let x = t(&[&[1.0, -1.0], &[2.0, 0.5], &[3.0, 4.0], &[-2.0, 1.0], &[0.5, 0.25]]);
        let k = t(&[&[0.2, 1.0], &[-0.5, 0.3], &[1.0, 2.0]]);
        let (whole, _) = causal_conv1d(&x, &k, &Tensor::zeros(2, 2)).unwrap();
        let a = slice_rows(&x, 0, 2).unwrap();
        let b = slice_rows(&x, 2, 3).unwrap();
        let (ya, h) = causal_conv1d(&a, &k, &Tensor::zeros(2, 2)).unwrap();
        let (yb, _) = causal_conv1d(&b, &k, &h).unwrap();
        assert_eq!(concat_rows(&[&ya, &yb]).unwrap(), whole);
    }

    #[test]
    fn row_subsets_are_bit_identical() {
        let a = t(&[&[0.1, 0.7, -0.3, 0.9, 1.1], &[0.3, -0.2, 0.5, 0.8, -1.7], &[2.0, 1.0, 0.0, -1.0, 0.3]]);
        let w = t(&[&[0.3, -0.1], &[0.2, 0.4], &[-0.7, 0.9], &[1.3, 0.01], &[0.5, 0.5]]);
        let full = matmul(&a, &w).unwrap();
        let sub = matmul(&slice_rows(&a, 1, 2).unwrap(), &w).unwrap();
        assert_eq!(sub.data(), &full.data()[2..]);
    }

    #[test]
    fn repeat_rows_preserves_order() {
        let x = t(&[&[1.0], &[2.0]]);
        assert_eq!(repeat_rows(&x, 3).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(repeat_rows(&x, 1).unwrap(), x);
    }

    #[test]
    fn boolean_composition() {
        let a = BoolMatrix::from_fn(3, 3, |i, j| j <= i + 1);
        let aa = a.compose(&a).unwrap();
        assert!(aa.get(0, 2));
        assert!(!a.get(0, 2));
    }
}
