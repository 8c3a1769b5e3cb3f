pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod text;
pub mod train;
pub mod vision;

pub use config::{RunConfig, TrainSettings};
pub use error::{Error, Result};
pub use fusion::{AdapterParams, FusionStrategy};
pub use model::{Gradients, LmConfig, LmParams, ModelParams, VisualFeatures};
pub use numerics::{Rng, Tensor2D};
pub use text::{TokenizedSample, Vocab};
pub use vision::{Image, VisionConfig};
