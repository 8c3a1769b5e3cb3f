//! Run configuration shared by the command line and the library pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionStrategy;
use crate::model::LmConfig;
use crate::vision::VisionConfig;

/// Optimizer schedule for both stages. The learning rate restarts at its
/// initial value at the start of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub align_lr0: f64,
    pub ground_lr0: f64,
    pub batch_size: usize,
    pub align_epochs: usize,
    pub ground_epochs: usize,
    pub max_len: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            align_lr0: 0.3,
            ground_lr0: 0.3,
            batch_size: 16,
            align_epochs: 5,
            ground_epochs: 5,
            max_len: crate::text::DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fusion: FusionStrategy,
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub train: TrainSettings,
    pub data: GenConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            fusion: FusionStrategy::Simof,
            vision: VisionConfig::default(),
            lm: LmConfig::default(),
            train: TrainSettings::default(),
            data: GenConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        if self.vision.d_glo != self.lm.d_model {
            return Err(Error::Config(format!(
                "vision.d_glo ({}) must equal lm.d_model ({})",
                self.vision.d_glo, self.lm.d_model
            )));
        }
        if self.vision.image_size != self.data.image_size
            || self.vision.patch_size != self.data.patch_size
        {
            return Err(Error::Config(
                "vision and data configs disagree on image or patch size".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.train.max_len > self.lm.max_text_len {
            return Err(Error::Config(format!(
                "train.max_len {} exceeds lm.max_text_len {}",
                self.train.max_len, self.lm.max_text_len
            )));
        }
        for lr in [self.train.align_lr0, self.train.ground_lr0] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("invalid learning rate {lr}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Shrinks datasets and epochs for smoke runs.
    pub fn quick(mut self) -> Self {
        self.data.n_train = self.data.n_train.min(200);
        self.data.n_test = self.data.n_test.min(50);
        self.data.n_captions = self.data.n_captions.min(200);
        self.train.align_epochs = self.train.align_epochs.min(1);
        self.train.ground_epochs = self.train.ground_epochs.min(1);
        self
    }
}
