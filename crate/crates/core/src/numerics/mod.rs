//! Dense numerics shared by every other module: a row-major 2-D tensor,
//! gemm, row softmax, layer norm, GELU, masked attention, the seeded RNG and
//! the SGD step with cosine annealing.

mod attention;
mod ops;
mod optim;
mod rng;
mod scalar;
mod tensor;

pub use attention::{masked_attention, BoolMatrix};
pub(crate) use attention::{attention_backward, attention_forward, DistanceBias};
pub use ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, LayerNormCache};
pub use optim::{cosine_lr, sgd_update};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{gemm, Tensor2D};
