use super::{Scalar, Tensor2D};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Values saved by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor2D<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization to zero mean and unit variance, followed by an
/// optional elementwise affine (`gamma`, `beta` are `1 x cols`).
pub fn layer_norm<T: Scalar>(
    x: &Tensor2D<T>,
    gamma: Option<&Tensor2D<T>>,
    beta: Option<&Tensor2D<T>>,
) -> (Tensor2D<T>, LayerNormCache<T>) {
    let (rows, cols) = x.shape();
    let n = T::of(cols as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Tensor2D::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    let mut y = xhat.clone();
    if let Some(g) = gamma {
        for r in 0..rows {
            for (o, &gv) in y.row_mut(r).iter_mut().zip(g.data()) {
                *o = *o * gv;
            }
        }
    }
    if let Some(b) = beta {
        y.add_row_broadcast(b);
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]. Accumulates into `dgamma`/`dbeta` when given.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor2D<T>,
    cache: &LayerNormCache<T>,
    gamma: Option<&Tensor2D<T>>,
    dgamma: Option<&mut Tensor2D<T>>,
    dbeta: Option<&mut Tensor2D<T>>,
) -> Tensor2D<T> {
    let (rows, cols) = dy.shape();
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for ((g, &d), &xh) in dg.data_mut().iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                *g = *g + d * xh;
            }
        }
    }
    if let Some(db) = dbeta {
        dy.accumulate_col_sums(db);
    }
    let n = T::of(cols as f64);
    let mut dx = Tensor2D::zeros(rows, cols);
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        match gamma {
            Some(g) => {
                for ((o, &d), &gv) in dxhat.iter_mut().zip(dyr).zip(g.data()) {
                    *o = d * gv;
                }
            }
            None => dxhat.copy_from_slice(dyr),
        }
        let xh = cache.xhat.row(r);
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let is = cache.inv_std[r];
        for ((o, &d), &x) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = is * (d - mean_d - x * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
