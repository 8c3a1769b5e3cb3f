//! Fusion and adapter-schedule ablations under one shared budget.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::fusion::FusionStrategy;
use crate::model::{ModelParams, VisualFeatures};
use crate::numerics::Rng;
use crate::pipeline::init_params;
use crate::text::Vocab;

use super::{encode_all, train_stage, TrainConfig, TrainLog};

/// How the adapter is trained across the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSchedule {
    /// Caption alignment, then joint grounding.
    Full,
    /// Joint grounding only.
    JointOnly,
    /// Caption alignment, then grounding with the adapter frozen.
    NoRefine,
    /// Adapter fitted on forensic data with the language model frozen, then
    /// frozen while the language model is grounded.
    NoPrealign,
}

impl AdapterSchedule {
    pub const ALL: [AdapterSchedule; 4] = [
        AdapterSchedule::NoPrealign,
        AdapterSchedule::NoRefine,
        AdapterSchedule::JointOnly,
        AdapterSchedule::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterSchedule::Full => "full",
            AdapterSchedule::JointOnly => "joint_only",
            AdapterSchedule::NoRefine => "no_refine",
            AdapterSchedule::NoPrealign => "no_prealign",
        }
    }
}

impl fmt::Display for AdapterSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter schedule `{s}`")))
    }
}

/// Everything an ablation run reads.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationData {
    pub captions: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub vocab: Vocab,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub strategy: FusionStrategy,
    pub schedule: AdapterSchedule,
    pub params: ModelParams<f32>,
    pub logs: Vec<TrainLog>,
    pub report: EvalReport,
}

/// Runs ablation variants, sharing encoder features and caption-aligned
/// adapters between variants that would otherwise recompute them.
pub struct AblationRunner<'a> {
    data: &'a AblationData,
    cfg: &'a RunConfig,
    caption_feats: Option<Vec<VisualFeatures<f32>>>,
    train_feats: Option<Vec<VisualFeatures<f32>>>,
    aligned: HashMap<FusionStrategy, (ModelParams<f32>, TrainLog)>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(data: &'a AblationData, cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        for (name, set) in [("caption", &data.captions), ("train", &data.train), ("test", &data.test)] {
            if set.is_empty() {
                return Err(Error::Config(format!("the {name} set is empty")));
            }
        }
        Ok(Self {
            data,
            cfg,
            caption_feats: None,
            train_feats: None,
            aligned: HashMap::new(),
        })
    }

    fn stage_seed(&self, key: u64) -> u64 {
        Rng::new(self.cfg.seed).split(key).seed()
    }

    fn align_cfg(&self, strategy: FusionStrategy) -> TrainConfig {
        let t = &self.cfg.train;
        TrainConfig {
            max_len: t.max_len,
            ..TrainConfig::align(strategy, t.align_lr0, t.batch_size, t.align_epochs, self.stage_seed(201))
        }
    }

    fn ground_cfg(&self, strategy: FusionStrategy, adapter_frozen: bool) -> TrainConfig {
        let t = &self.cfg.train;
        TrainConfig {
            max_len: t.max_len,
            adapter_frozen,
            ..TrainConfig::ground(strategy, t.ground_lr0, t.batch_size, t.ground_epochs, self.stage_seed(202))
        }
    }

    // Encoders do not depend on the strategy, so any initialized model
    // yields the same features.
    fn features(&mut self, params: &ModelParams<f32>) -> Result<()> {
        if self.caption_feats.is_none() {
            self.caption_feats = Some(encode_all(params, &self.data.captions)?);
        }
        if self.train_feats.is_none() {
            self.train_feats = Some(encode_all(params, &self.data.train)?);
        }
        Ok(())
    }

    fn aligned(&mut self, init: &ModelParams<f32>) -> Result<(ModelParams<f32>, TrainLog)> {
        let strategy = init.strategy;
        if let Some(hit) = self.aligned.get(&strategy) {
            return Ok(hit.clone());
        }
        let cfg = self.align_cfg(strategy);
        let out = train_stage(
            &self.data.captions,
            init,
            &self.data.vocab,
            &cfg,
            self.caption_feats.as_deref(),
        )?;
        self.aligned.insert(strategy, out.clone());
        Ok(out)
    }

    /// Trains and evaluates one variant.
    pub fn run(&mut self, strategy: FusionStrategy, schedule: AdapterSchedule) -> Result<AblationOutcome> {
        let init = init_params(self.cfg, &self.data.vocab, strategy)?;
        self.features(&init)?;
        let train = &self.data.train;
        let vocab = &self.data.vocab;
        let mut logs = Vec::new();

        // Without an adapter on the data path every schedule reduces to
        // grounding the language model.
        let schedule_eff = if strategy.uses_adapter() {
            schedule
        } else {
            AdapterSchedule::JointOnly
        };
        let start = match schedule_eff {
            AdapterSchedule::Full | AdapterSchedule::NoRefine => {
                let (p, log) = self.aligned(&init)?;
                logs.push(log);
                p
            }
            AdapterSchedule::JointOnly => init,
            AdapterSchedule::NoPrealign => {
                let cfg = self.align_cfg(strategy);
                let (p, log) = train_stage(train, &init, vocab, &cfg, self.train_feats.as_deref())?;
                logs.push(log);
                p
            }
        };
        let freeze_adapter = matches!(schedule_eff, AdapterSchedule::NoRefine | AdapterSchedule::NoPrealign);
        let cfg = self.ground_cfg(strategy, freeze_adapter);
        let (params, log) = train_stage(train, &start, vocab, &cfg, self.train_feats.as_deref())?;
        logs.push(log);

        let report = evaluate(&params, vocab, &self.data.test, &self.cfg.eval)?;
        log::info!(
            "ablation {strategy}/{schedule}: accuracy {:.4}",
            report.accuracy
        );
        Ok(AblationOutcome {
            strategy,
            schedule,
            params,
            logs,
            report,
        })
    }
}

/// Runs one `(strategy, schedule)` variant end to end.
pub fn run_ablation(
    strategy: FusionStrategy,
    schedule: AdapterSchedule,
    data: &AblationData,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    Ok(AblationRunner::new(data, cfg)?.run(strategy, schedule)?.report)
}
