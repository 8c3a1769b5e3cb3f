//! Cross-modal adapter and the parameter-free fusion of global and adapted
//! local token streams.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor2D};
use crate::params::NamedTensors;

/// Single affine layer projecting local features into the LM width.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T = f32> {
    pub weight: Tensor2D<T>,
    pub bias: Tensor2D<T>,
    pub frozen: bool,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn init(d_loc: usize, d_lm: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d_loc as f64).sqrt();
        let data = (0..d_loc * d_lm).map(|_| T::of(rng.normal() * std)).collect();
        Self {
            weight: Tensor2D::from_vec(d_loc, d_lm, data).expect("length matches shape"),
            bias: Tensor2D::zeros(1, d_lm),
            frozen: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor2D::zeros(self.weight.rows(), self.weight.cols()),
            bias: Tensor2D::zeros(1, self.bias.cols()),
            frozen: self.frozen,
        }
    }

    pub fn d_loc(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_lm(&self) -> usize {
        self.weight.cols()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterParams<U> {
        AdapterParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            frozen: self.frozen,
        }
    }
}

impl<T: Scalar> NamedTensors<T> for AdapterParams<T> {
    fn named(&self) -> Vec<(String, &Tensor2D<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Row-wise `f_loc · W + b`.
pub fn adapt<T: Scalar>(f_loc: &Tensor2D<T>, a: &AdapterParams<T>) -> Result<Tensor2D<T>> {
    if f_loc.cols() != a.d_loc() {
        return Err(Error::Dimension(format!(
            "local features have width {}, adapter expects {}",
            f_loc.cols(),
            a.d_loc()
        )));
    }
    let mut out = f_loc.matmul(&a.weight)?;
    out.add_row_broadcast(&a.bias);
    Ok(out)
}

/// Gradients of [`adapt`] accumulated into `grad`, given `d_out`.
pub fn adapt_backward<T: Scalar>(
    f_loc: &Tensor2D<T>,
    d_out: &Tensor2D<T>,
    grad: &mut AdapterParams<T>,
) -> Result<()> {
    crate::numerics::gemm(T::one(), f_loc, true, d_out, false, T::one(), &mut grad.weight)?;
    d_out.accumulate_col_sums(&mut grad.bias);
    Ok(())
}

fn check_pair<T: Scalar>(f_glo: &Tensor2D<T>, f_aloc: &Tensor2D<T>) -> Result<()> {
    if f_glo.shape() != f_aloc.shape() {
        return Err(Error::Dimension(format!(
            "global stream {:?} vs adapted local stream {:?}",
            f_glo.shape(),
            f_aloc.shape()
        )));
    }
    Ok(())
}

/// Alternates the two streams: output row `2j` is `f_glo[j]`, row `2j + 1`
/// is `f_aloc[j]` (0-indexed).
pub fn interleave<T: Scalar>(f_glo: &Tensor2D<T>, f_aloc: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    check_pair(f_glo, f_aloc)?;
    let (n, d) = f_glo.shape();
    let mut out = Tensor2D::zeros(2 * n, d);
    for j in 0..n {
        out.row_mut(2 * j).copy_from_slice(f_glo.row(j));
        out.row_mut(2 * j + 1).copy_from_slice(f_aloc.row(j));
    }
    Ok(out)
}

/// All global rows followed by all adapted-local rows.
pub fn concat_fuse<T: Scalar>(f_glo: &Tensor2D<T>, f_aloc: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    check_pair(f_glo, f_aloc)?;
    Tensor2D::vstack(&[f_glo, f_aloc])
}

/// Inverse of [`interleave`]: even rows, then odd rows.
pub fn deinterleave<T: Scalar>(f: &Tensor2D<T>) -> Result<(Tensor2D<T>, Tensor2D<T>)> {
    if f.rows() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "cannot deinterleave {} rows",
            f.rows()
        )));
    }
    let n = f.rows() / 2;
    let mut a = Tensor2D::zeros(n, f.cols());
    let mut b = Tensor2D::zeros(n, f.cols());
    for j in 0..n {
        a.row_mut(j).copy_from_slice(f.row(2 * j));
        b.row_mut(j).copy_from_slice(f.row(2 * j + 1));
    }
    Ok((a, b))
}

/// Which visual token streams reach the language model, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Interleaved mixture of features.
    Simof,
    /// Concatenated mixture of features.
    Cmof,
    GlobalOnly,
    LocalOnly,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::GlobalOnly,
        FusionStrategy::LocalOnly,
        FusionStrategy::Cmof,
        FusionStrategy::Simof,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Simof => "simof",
            FusionStrategy::Cmof => "cmof",
            FusionStrategy::GlobalOnly => "global_only",
            FusionStrategy::LocalOnly => "local_only",
        }
    }

    /// Whether the adapter sits on the data path.
    pub fn uses_adapter(self) -> bool {
        !matches!(self, FusionStrategy::GlobalOnly)
    }

    pub fn n_visual(self, n_tokens: usize) -> usize {
        match self {
            FusionStrategy::Simof | FusionStrategy::Cmof => 2 * n_tokens,
            FusionStrategy::GlobalOnly | FusionStrategy::LocalOnly => n_tokens,
        }
    }

    /// Builds the visual token block fed to the language model.
    pub fn fuse<T: Scalar>(
        self,
        f_glo: &Tensor2D<T>,
        f_aloc: Option<&Tensor2D<T>>,
    ) -> Result<Tensor2D<T>> {
        let need_local = || {
            f_aloc.ok_or_else(|| {
                Error::Config(format!("{} needs adapted local features", self.as_str()))
            })
        };
        match self {
            FusionStrategy::Simof => interleave(f_glo, need_local()?),
            FusionStrategy::Cmof => concat_fuse(f_glo, need_local()?),
            FusionStrategy::GlobalOnly => Ok(f_glo.clone()),
            FusionStrategy::LocalOnly => Ok(need_local()?.clone()),
        }
    }

    /// Extracts the gradient w.r.t. the adapted local stream from the
    /// gradient w.r.t. the fused block. `None` when the adapter is bypassed.
    pub fn local_grad<T: Scalar>(self, d_fused: &Tensor2D<T>) -> Result<Option<Tensor2D<T>>> {
        Ok(match self {
            FusionStrategy::Simof => Some(deinterleave(d_fused)?.1),
            FusionStrategy::Cmof => {
                let n = d_fused.rows() / 2;
                Some(d_fused.slice_rows(n, 2 * n))
            }
            FusionStrategy::GlobalOnly => None,
            FusionStrategy::LocalOnly => Some(d_fused.clone()),
        })
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simof" => Ok(FusionStrategy::Simof),
            "cmof" => Ok(FusionStrategy::Cmof),
            "global_only" => Ok(FusionStrategy::GlobalOnly),
            "local_only" => Ok(FusionStrategy::LocalOnly),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn rows(vals: &[f64]) -> Tensor2D<f64> {
        Tensor2D::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_weight_gives_bias_rows() {
        let mut a = AdapterParams::<f64>::init(3, 2, &mut Rng::new(0));
        a.weight = Tensor2D::zeros(3, 2);
        a.bias = Tensor2D::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        let f = Tensor2D::from_vec(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let out = adapt(&f, &a).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), &[0.5, -1.0]);
        }
    }

    #[test]
    fn identity_adapter_is_identity() {
        let mut a = AdapterParams::<f64>::init(3, 3, &mut Rng::new(0));
        a.weight = Tensor2D::identity(3);
        let f = Tensor2D::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(adapt(&f, &a).unwrap(), f);
    }

    #[test]
    fn adapter_width_mismatch() {
        let a = AdapterParams::<f32>::init(4, 3, &mut Rng::new(0));
        assert!(matches!(
            adapt(&Tensor2D::zeros(2, 5), &a),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adapter_full_scale_shape() {
        let a = AdapterParams::<f32>::init(2048, 2304, &mut Rng::new(0));
        let out = adapt(&Tensor2D::zeros(1024, 2048), &a).unwrap();
        assert_eq!(out.shape(), (1024, 2304));
    }

    #[test]
    fn interleave_and_concat_orders() {
        let g = rows(&[1.0, 2.0]);
        let l = rows(&[10.0, 20.0]);
        assert_eq!(interleave(&g, &l).unwrap().data(), &[1.0, 10.0, 2.0, 20.0]);
        assert_eq!(concat_fuse(&g, &l).unwrap().data(), &[1.0, 2.0, 10.0, 20.0]);
        let g1 = rows(&[1.0]);
        let l1 = rows(&[10.0]);
        assert_eq!(
            interleave(&g1, &l1).unwrap(),
            concat_fuse(&g1, &l1).unwrap()
        );
        assert_eq!(
            interleave(&Tensor2D::<f32>::zeros(1024, 2), &Tensor2D::zeros(1024, 2))
                .unwrap()
                .rows(),
            2048
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Tensor2D::<f32>::zeros(2, 3);
        let l = Tensor2D::<f32>::zeros(3, 3);
        assert!(interleave(&g, &l).is_err());
        assert!(concat_fuse(&g, &Tensor2D::zeros(2, 4)).is_err());
        assert!(deinterleave(&Tensor2D::<f32>::zeros(3, 1)).is_err());
    }

    #[test]
    fn deinterleave_examples() {
        let (a, b) = deinterleave(&rows(&[1.0, 10.0, 2.0, 20.0])).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[10.0, 20.0]);
        let (a, b) = deinterleave(&Tensor2D::<f32>::zeros(0, 4)).unwrap();
        assert_eq!((a.rows(), b.rows()), (0, 0));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.as_str().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("both".parse::<FusionStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn deinterleave_inverts_interleave(n in 0usize..20, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut t = || Tensor2D::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
            let (g, l) = (t(), t());
            let (g2, l2) = deinterleave(&interleave(&g, &l).unwrap()).unwrap();
            prop_assert_eq!(g2, g);
            prop_assert_eq!(l2, l);
        }

        #[test]
        fn concat_is_row_permutation_of_interleave(n in 1usize..10, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let g = Tensor2D::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
            let l = Tensor2D::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
            let key = |t: &Tensor2D<f64>| {
                let mut rows: Vec<Vec<u64>> = (0..t.rows())
                    .map(|r| t.row(r).iter().map(|x| x.to_bits()).collect())
                    .collect();
                rows.sort();
                rows
            };
            prop_assert_eq!(key(&interleave(&g, &l).unwrap()), key(&concat_fuse(&g, &l).unwrap()));
        }
    }
}
