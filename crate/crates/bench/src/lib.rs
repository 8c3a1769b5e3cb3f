//! Shared fixtures for the benchmarks.

use mofg_core::data::{gen_forensic_set, Dataset, GenConfig};
use mofg_core::pipeline::{build_vocab, init_params};
use mofg_core::{FusionStrategy, ModelParams, Rng, RunConfig, Tensor2D, Vocab};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor2D<f32> {
    let mut rng = Rng::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal() as f32).collect();
    Tensor2D::from_vec(rows, cols, data).expect("shape matches")
}

/// Default-sized model with a vocabulary built from a small forensic set.
pub struct Fixture {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub vocab: Vocab,
    pub params: ModelParams<f32>,
}

pub fn fixture(strategy: FusionStrategy, n: usize) -> Fixture {
    let cfg = RunConfig::default();
    let data = gen_forensic_set(n, 0, &GenConfig::default()).expect("generation succeeds");
    let vocab = build_vocab(&data, &data, &cfg).expect("vocabulary builds");
    let params = init_params(&cfg, &vocab, strategy).expect("params initialize");
    Fixture {
        cfg,
        data,
        vocab,
        params,
    }
}
