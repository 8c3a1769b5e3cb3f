//! Glue between configuration, data generation and model construction.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{corpus, gen_caption_set, gen_forensic_set, Dataset};
use crate::error::Result;
use crate::fusion::FusionStrategy;
use crate::model::ModelParams;
use crate::numerics::Rng;
use crate::text::Vocab;

/// Seeds of the three generated sets, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSeeds {
    pub captions: u64,
    pub train: u64,
    pub test: u64,
}

impl DataSeeds {
    pub fn from_run_seed(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            captions: root.split(101).seed(),
            train: root.split(102).seed(),
            test: root.split(103).seed(),
        }
    }

    /// Seed used for parameter initialization.
    pub fn params(seed: u64) -> u64 {
        Rng::new(seed).split(104).seed()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub captions: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn generate_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let seeds = DataSeeds::from_run_seed(cfg.seed);
    Ok(Datasets {
        captions: gen_caption_set(cfg.data.n_captions, seeds.captions, &cfg.data)?,
        train: gen_forensic_set(cfg.data.n_train, seeds.train, &cfg.data)?,
        test: gen_forensic_set(cfg.data.n_test, seeds.test, &cfg.data)?,
    })
}

/// Vocabulary over the caption and training texts.
pub fn build_vocab(captions: &Dataset, train: &Dataset, cfg: &RunConfig) -> Result<Vocab> {
    Vocab::build(&corpus(&[captions, train]), cfg.lm.max_vocab)
}

pub fn init_params(cfg: &RunConfig, vocab: &Vocab, strategy: FusionStrategy) -> Result<ModelParams<f32>> {
    ModelParams::init(&cfg.vision, &cfg.lm, vocab.len(), strategy, DataSeeds::params(cfg.seed))
}
