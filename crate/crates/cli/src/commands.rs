use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mofg_core::data::{gen_forensic_set, load_image, load_jsonl, save_image, save_jsonl, Dataset};
use mofg_core::eval::{evaluate, EvalReport, JudgeKind};
use mofg_core::model::generate;
use mofg_core::pipeline::{build_vocab, generate_datasets, init_params, DataSeeds};
use mofg_core::train::{
    load_checkpoint, save_checkpoint, stage1_align, stage2_ground, AblationData, AblationRunner,
    AdapterSchedule, Checkpoint, Stage, TrainConfig, TrainLog,
};
use mofg_core::{Error, FusionStrategy, RunConfig};
use serde::Serialize;

use crate::{Common, JudgeFlags, StageArg};

pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SAMPLE_IMAGE_FILE: &str = "sample_image.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config file (or defaults) with the shared flags applied, validated.
fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if common.quick {
        cfg = cfg.quick();
    }
    Ok(cfg)
}

fn apply_judge(cfg: &mut RunConfig, judge: &JudgeFlags) {
    if let Some(endpoint) = &judge.endpoint {
        cfg.eval.endpoint = Some(endpoint.clone());
        if judge.judge.is_none() {
            cfg.eval.judge = JudgeKind::Remote;
        }
    }
    if let Some(kind) = judge.judge {
        cfg.eval.judge = kind;
    }
}

/// Creates the output directory and records the effective configuration.
fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, format!("{text}\n")).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(Error::Format(e.to_string())))?;
    write_text(path, &text)
}

pub fn gen_data(common: &Common, n: Option<usize>, n_test: Option<usize>) -> CliResult {
    let mut cfg = resolve_config(common)?;
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--n must be at least 1".into()));
        }
        cfg.data.n_train = n;
        cfg.data.n_captions = n;
    }
    if let Some(n) = n_test {
        if n == 0 {
            return Err(CliError::Usage("--n-test must be at least 1".into()));
        }
        cfg.data.n_test = n;
    }
    let out = prepare_out(&cfg)?;
    let sets = generate_datasets(&cfg)?;
    save_jsonl(&sets.captions, &out.join(CAPTIONS_FILE))?;
    save_jsonl(&sets.train, &out.join(TRAIN_FILE))?;
    save_jsonl(&sets.test, &out.join(TEST_FILE))?;
    // One fake image for trying `infer` by hand.
    let sample = gen_forensic_set(2, DataSeeds::from_run_seed(cfg.seed).test, &cfg.data)?;
    save_image(&sample[1].image, &out.join(SAMPLE_IMAGE_FILE))?;
    println!(
        "wrote {} captions, {} train and {} test examples to {}",
        sets.captions.len(),
        sets.train.len(),
        sets.test.len(),
        out.display()
    );
    Ok(())
}

fn load_set(dir: &Path, file: &str) -> CliResult<Dataset> {
    Ok(load_jsonl(&dir.join(file))?)
}

pub fn train(
    common: &Common,
    data: Option<PathBuf>,
    stage: StageArg,
    fusion: Option<FusionStrategy>,
    checkpoint: Option<PathBuf>,
) -> CliResult {
    let mut cfg = resolve_config(common)?;
    if let Some(f) = fusion {
        cfg.fusion = f;
    }
    if checkpoint.is_some() && stage != StageArg::Ground {
        return Err(CliError::Usage("--checkpoint only applies to --stage ground".into()));
    }
    let out = prepare_out(&cfg)?;
    let data_dir = data.unwrap_or_else(|| out.clone());
    let train_set = load_set(&data_dir, TRAIN_FILE)?;
    let captions = if stage == StageArg::Ground {
        Vec::new()
    } else {
        load_set(&data_dir, CAPTIONS_FILE)?
    };

    let (mut params, vocab) = match &checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path, Some(cfg.fusion))?;
            if ckpt.meta.vision != cfg.vision || ckpt.meta.lm != cfg.lm {
                return Err(CliError::Core(Error::Config(
                    "checkpoint model configuration differs from the run configuration".into(),
                )));
            }
            (ckpt.params, ckpt.vocab)
        }
        None => {
            let vocab_src = if captions.is_empty() {
                load_set(&data_dir, CAPTIONS_FILE)?
            } else {
                captions.clone()
            };
            let vocab = build_vocab(&vocab_src, &train_set, &cfg)?;
            (init_params(&cfg, &vocab, cfg.fusion)?, vocab)
        }
    };

    let t = cfg.train;
    let mut logs: Vec<(Stage, TrainLog)> = Vec::new();
    for &s in stage.stages() {
        let (next, log, set, file) = match s {
            Stage::Align => {
                let tc = TrainConfig {
                    max_len: t.max_len,
                    ..TrainConfig::align(cfg.fusion, t.align_lr0, t.batch_size, t.align_epochs, cfg.seed)
                };
                let (p, log) = stage1_align(&captions, &params, &vocab, &tc)?;
                (p, log, &captions, "align.ckpt")
            }
            Stage::Ground => {
                let tc = TrainConfig {
                    max_len: t.max_len,
                    ..TrainConfig::ground(cfg.fusion, t.ground_lr0, t.batch_size, t.ground_epochs, cfg.seed)
                };
                let (p, log) = stage2_ground(&train_set, &params, &vocab, &tc)?;
                (p, log, &train_set, "ground.ckpt")
            }
        };
        let steps = log.step_losses.len() as u64;
        let path = out.join(file);
        let ckpt = Checkpoint::new(next.clone(), vocab.clone(), cfg.vision, cfg.lm, Some(s), steps);
        save_checkpoint(&path, &ckpt)?;
        println!(
            "{s}: {} examples, {steps} steps, final epoch loss {:.4}, saved {}",
            set.len(),
            log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            path.display()
        );
        params = next;
        logs.push((s, log));
    }
    write_json(&out.join("train_log.json"), &logs)
}

fn summary(report: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "accuracy": report.accuracy,
        "bleu3": report.bleu3,
        "bleu4": report.bleu4,
        "rouge_l": report.rouge_l,
        "cider": report.cider,
        "n_examples": report.n_examples,
        "n_skipped": report.n_skipped,
        "n_no_verdict": report.n_no_verdict,
    })
}

pub fn eval(
    common: &Common,
    data: Option<PathBuf>,
    checkpoint: &Path,
    fusion: Option<FusionStrategy>,
    judge: &JudgeFlags,
    max_new: Option<usize>,
) -> CliResult {
    let mut cfg = resolve_config(common)?;
    apply_judge(&mut cfg, judge);
    if let Some(m) = max_new {
        cfg.eval.max_new_tokens = m;
    }
    let ckpt = load_checkpoint(checkpoint, fusion)?;
    cfg.fusion = ckpt.meta.strategy;
    cfg.vision = ckpt.meta.vision;
    cfg.lm = ckpt.meta.lm;
    let out = prepare_out(&cfg)?;
    let data_dir = data.unwrap_or_else(|| out.clone());
    let test = load_set(&data_dir, TEST_FILE)?;
    if test.is_empty() {
        return Err(CliError::Usage(format!(
            "the test set {} is empty",
            data_dir.join(TEST_FILE).display()
        )));
    }
    let report = evaluate(&ckpt.params, &ckpt.vocab, &test, &cfg.eval)?;
    write_text(&out.join("report.json"), &report.to_json())?;
    println!("{}", summary(&report));
    Ok(())
}

pub fn infer(checkpoint: &Path, image: &Path, question: &str, max_new: usize) -> CliResult {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let img = load_image(image)?;
    let answer = generate(&img, question, &ckpt.params, &ckpt.vocab, max_new)?;
    println!("{answer}");
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    table: &'static str,
    fusion: FusionStrategy,
    schedule: AdapterSchedule,
    accuracy: f64,
    bleu3: f64,
    bleu4: f64,
    rouge_l: f64,
    cider: f64,
}

impl AblationRow {
    fn new(table: &'static str, fusion: FusionStrategy, schedule: AdapterSchedule, r: &EvalReport) -> Self {
        Self {
            table,
            fusion,
            schedule,
            accuracy: r.accuracy,
            bleu3: r.bleu3,
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            cider: r.cider,
        }
    }
}

pub fn ablate(common: &Common, data: Option<PathBuf>, judge: &JudgeFlags) -> CliResult {
    let mut cfg = resolve_config(common)?;
    apply_judge(&mut cfg, judge);
    let out = prepare_out(&cfg)?;
    let sets = match &data {
        Some(dir) => mofg_core::pipeline::Datasets {
            captions: load_set(dir, CAPTIONS_FILE)?,
            train: load_set(dir, TRAIN_FILE)?,
            test: load_set(dir, TEST_FILE)?,
        },
        None => generate_datasets(&cfg)?,
    };
    let vocab = build_vocab(&sets.captions, &sets.train, &cfg)?;
    let data = AblationData {
        captions: sets.captions,
        train: sets.train,
        test: sets.test,
        vocab,
    };
    let mut runner = AblationRunner::new(&data, &cfg)?;
    let mut rows = Vec::new();
    let mut default_report = None;
    for fusion in FusionStrategy::ALL {
        let report = runner.run(fusion, AdapterSchedule::Full)?.report;
        rows.push(AblationRow::new("fusion", fusion, AdapterSchedule::Full, &report));
        if fusion == FusionStrategy::Simof {
            default_report = Some(report);
        }
    }
    for schedule in AdapterSchedule::ALL {
        let report = match (schedule, &default_report) {
            (AdapterSchedule::Full, Some(r)) => r.clone(),
            _ => runner.run(FusionStrategy::Simof, schedule)?.report,
        };
        rows.push(AblationRow::new("adapter", FusionStrategy::Simof, schedule, &report));
    }
    write_json(&out.join("ablation.json"), &rows)?;
    println!(
        "{:<8} {:<12} {:<12} {:>8} {:>7} {:>7} {:>7} {:>7}",
        "table", "fusion", "schedule", "accuracy", "bleu3", "bleu4", "rouge_l", "cider"
    );
    for r in &rows {
        println!(
            "{:<8} {:<12} {:<12} {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.table,
            r.fusion.as_str(),
            r.schedule.as_str(),
            r.accuracy,
            r.bleu3,
            r.bleu4,
            r.rouge_l,
            r.cider
        );
    }
    Ok(())
}
