//! Two-stage training: adapter alignment on captions with the language model
//! frozen, then joint grounding on forensic question answering.

mod ablation;
mod checkpoint;

pub use ablation::{run_ablation, AblationData, AblationOutcome, AblationRunner, AdapterSchedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ForensicExample;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::model::{Gradients, ModelParams, VisualFeatures};
use crate::numerics::Rng;
use crate::text::{build_training_sequence, TokenizedSample, Vocab};

/// Learning rate and batch size of the original full-scale recipe.
pub const FULL_SCALE_LR0: f64 = 1e-4;
pub const FULL_SCALE_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Align,
    Ground,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Align => "align",
            Stage::Ground => "ground",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "align" => Ok(Stage::Align),
            "ground" => Ok(Stage::Ground),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub fusion: FusionStrategy,
    pub adapter_frozen: bool,
    pub lm_frozen: bool,
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl TrainConfig {
    pub fn align(fusion: FusionStrategy, lr0: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Align,
            fusion,
            adapter_frozen: false,
            lm_frozen: true,
            lr0,
            batch_size,
            epochs,
            seed,
            max_len: crate::text::DEFAULT_MAX_LEN,
        }
    }

    pub fn ground(fusion: FusionStrategy, lr0: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Ground,
            lm_frozen: false,
            ..Self::align(fusion, lr0, batch_size, epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Align && !self.lm_frozen {
            return Err(Error::Config("the align stage keeps the language model frozen".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr0)));
        }
        Ok(())
    }
}

/// Per-step losses and per-epoch means of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Frozen encoder outputs for every image of a dataset.
pub fn encode_all(params: &ModelParams<f32>, data: &[ForensicExample]) -> Result<Vec<VisualFeatures<f32>>> {
    data.par_iter().map(|ex| params.encode(&ex.image)).collect()
}

pub fn tokenize_all(data: &[ForensicExample], vocab: &Vocab, max_len: usize) -> Result<Vec<TokenizedSample>> {
    data.iter()
        .map(|ex| build_training_sequence(&ex.question, &ex.answer, vocab, max_len))
        .collect()
}

/// Runs one stage over `data` and returns the updated parameters.
///
/// Encoders are never updated; the adapter and language model are updated
/// unless frozen by `cfg`. Batches are processed in parallel and their
/// gradients reduced in batch order, so results are bitwise reproducible.
pub fn train_stage(
    data: &[ForensicExample],
    params: &ModelParams<f32>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    features: Option<&[VisualFeatures<f32>]>,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config(format!("the {} dataset is empty", cfg.stage)));
    }
    if cfg.fusion != params.strategy {
        return Err(Error::Config(format!(
            "training config uses {}, parameters are wired for {}",
            cfg.fusion, params.strategy
        )));
    }
    let mut model = params.clone();
    model.adapter.frozen = cfg.adapter_frozen;
    model.lm.frozen = cfg.lm_frozen;

    let owned;
    let feats = match features {
        Some(f) if f.len() == data.len() => f,
        Some(_) => return Err(Error::Dimension("features do not match the dataset".into())),
        None => {
            owned = encode_all(&model, data)?;
            &owned
        }
    };
    let samples = tokenize_all(data, vocab, cfg.max_len)?;

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let order_rng = Rng::new(cfg.seed).split(0x5eed);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order_rng.split(epoch as u64).shuffle(&mut order);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f32, Gradients<f32>)>> = batch
                .par_iter()
                .map(|&i| model.sample_grads(&feats[i], &samples[i]))
                .collect();
            let mut grads = Gradients::empty();
            let mut loss = 0.0f64;
            for r in results {
                let (l, g) = r?;
                loss += l as f64;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            loss /= batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at step {step}")));
            }
            model.sgd_step(&grads, step, total, cfg.lr0)?;
            log.step_losses.push(loss);
            epoch_sum += loss;
            step += 1;
        }
        let mean = epoch_sum / steps_per_epoch as f64;
        log::info!("{} epoch {}/{}: mean loss {mean:.4}", cfg.stage, epoch + 1, cfg.epochs);
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}

/// Caption alignment: only the adapter learns.
pub fn stage1_align(
    captions: &[ForensicExample],
    params: &ModelParams<f32>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    if cfg.stage != Stage::Align {
        return Err(Error::Config("stage1_align needs an align config".into()));
    }
    train_stage(captions, params, vocab, cfg, None)
}

/// Forensic grounding: adapter and language model learn unless frozen.
pub fn stage2_ground(
    forensic: &[ForensicExample],
    params: &ModelParams<f32>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    if cfg.stage != Stage::Ground {
        return Err(Error::Config("stage2_ground needs a ground config".into()));
    }
    train_stage(forensic, params, vocab, cfg, None)
}

#[cfg(test)]
mod tests;
