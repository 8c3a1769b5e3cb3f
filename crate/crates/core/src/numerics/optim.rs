use std::f64::consts::PI;

use super::{Scalar, Tensor2D};
use crate::error::Result;

/// Cosine-annealed learning rate: `lr0` at step 0, zero at `total_steps`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// `param -= lr * grad` for one tensor.
pub fn sgd_update<T: Scalar>(param: &mut Tensor2D<T>, grad: &Tensor2D<T>, lr: f64) -> Result<()> {
    param.axpy(T::of(-lr), grad)
}
