//! Named-tensor views over parameter groups, used by the optimizer, the
//! checkpoint codec and the gradient checker.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2D};

/// A group of named tensors with a stable visiting order.
pub trait NamedTensors<T: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor2D<T>)>;

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)>;

    fn n_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data().len()).sum()
    }
}

/// Prefixes every name of a group, e.g. `lm.` + `tok_emb`.
pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a Tensor2D<T>)>,
) -> impl Iterator<Item = (String, &'a Tensor2D<T>)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor2D<T>)>,
) -> impl Iterator<Item = (String, &'a mut Tensor2D<T>)> + 'a {
    let prefix = prefix.to_string();
    items
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// `dst += src`, tensor by tensor, for two groups with the same layout.
pub fn accumulate<T: Scalar, P: NamedTensors<T>>(dst: &mut P, src: &P) -> Result<()> {
    let src = src.named();
    let mut dst = dst.named_mut();
    if src.len() != dst.len() {
        return Err(Error::Dimension("parameter groups differ in layout".into()));
    }
    for ((dn, d), (sn, s)) in dst.iter_mut().zip(src) {
        if *dn != sn || d.shape() != s.shape() {
            return Err(Error::Dimension(format!("{dn} does not match {sn}")));
        }
        d.add_assign(s);
    }
    Ok(())
}

/// Multiplies every tensor of a group by `alpha`.
pub fn scale_all<T: Scalar, P: NamedTensors<T>>(group: &mut P, alpha: T) {
    for (_, t) in group.named_mut() {
        t.scale(alpha);
    }
}
