use super::ops::softmax_in_place;
use super::{Scalar, Tensor2D};
use crate::error::{Error, Result};

/// Dense boolean matrix; `true` means "query row may attend to key column".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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

    pub fn lower_triangular(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `start..end`, all columns.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Top-left `n x n` block.
    pub fn leading_block(&self, n: usize) -> Self {
        Self::from_fn(n, n, |i, j| self.get(i, j))
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Single-head scaled dot-product attention restricted by `allowed`.
///
/// Disallowed scores are treated as `-inf` before the softmax. Every query
/// row must be allowed at least one key.
pub fn masked_attention<T: Scalar>(
    q: &Tensor2D<T>,
    k: &Tensor2D<T>,
    v: &Tensor2D<T>,
    allowed: &BoolMatrix,
) -> Result<Tensor2D<T>> {
    attention_forward(q, k, v, allowed, None).map(|(out, _)| out)
}

/// Linear distance penalty `-slope * |i - j|` added to the scores, with the
/// absolute position of query row 0 given by `query_offset` (keys start at 0).
#[derive(Debug, Clone, Copy)]
pub(crate) struct DistanceBias<T> {
    pub slope: T,
    pub query_offset: usize,
}

/// Returns the attention output and the softmax weights (zero where
/// disallowed).
pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor2D<T>,
    k: &Tensor2D<T>,
    v: &Tensor2D<T>,
    allowed: &BoolMatrix,
    bias: Option<DistanceBias<T>>,
) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    if q.cols() != k.cols() {
        return Err(Error::Dimension(format!(
            "query width {} != key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if allowed.rows() != q.rows() || allowed.cols() != k.rows() {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, scores are {}x{}",
            allowed.rows(),
            allowed.cols(),
            q.rows(),
            k.rows()
        )));
    }
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let mut probs = q.matmul_nt(k)?;
    for i in 0..probs.rows() {
        let mask = allowed.row(i);
        if !mask.iter().any(|&b| b) {
            return Err(Error::Contract(format!(
                "query row {i} has no visible keys"
            )));
        }
        let row = probs.row_mut(i);
        for (j, (s, &ok)) in row.iter_mut().zip(mask).enumerate() {
            if ok {
                *s = *s * scale;
                if let Some(b) = bias {
                    let d = (i + b.query_offset).abs_diff(j);
                    *s = *s - b.slope * T::of(d as f64);
                }
            } else {
                *s = T::neg_infinity();
            }
        }
        softmax_in_place(row);
    }
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Gradients of `attention_forward` w.r.t. queries, keys and values.
pub(crate) fn attention_backward<T: Scalar>(
    dout: &Tensor2D<T>,
    q: &Tensor2D<T>,
    k: &Tensor2D<T>,
    v: &Tensor2D<T>,
    probs: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>, Tensor2D<T>)> {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let dv = probs.matmul_tn(dout)?;
    let mut ds = dout.matmul_nt(v)?;
    for i in 0..ds.rows() {
        let p = probs.row(i);
        let dot = ds.row(i).iter().zip(p).map(|(&a, &b)| a * b).sum::<T>();
        for (d, &pv) in ds.row_mut(i).iter_mut().zip(p) {
            *d = pv * (*d - dot) * scale;
        }
    }
    let dq = ds.matmul(k)?;
    let dk = ds.matmul_tn(q)?;
    Ok((dq, dk, dv))
}
