use super::*;
use crate::config::RunConfig;
use crate::model::LmConfig;
use crate::params::NamedTensors;
use crate::pipeline::{build_vocab, generate_datasets, init_params, Datasets};
use crate::vision::VisionConfig;

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.vision = VisionConfig {
        image_size: 16,
        patch_size: 4,
        d_glo: 16,
        d_loc: 8,
        mixing_depth: 1,
    };
    cfg.lm = LmConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_text_len: 64,
        ..LmConfig::default()
    };
    cfg.data.image_size = 16;
    cfg.data.patch_size = 4;
    cfg.data.n_captions = 24;
    cfg.data.n_train = 24;
    cfg.data.n_test = 6;
    cfg.train.batch_size = 8;
    cfg.train.align_epochs = 2;
    cfg.train.ground_epochs = 2;
    cfg.eval.max_new_tokens = 6;
    cfg.validate().unwrap();
    cfg
}

fn setup(strategy: FusionStrategy) -> (RunConfig, Datasets, Vocab, ModelParams<f32>) {
    let cfg = tiny_cfg();
    let data = generate_datasets(&cfg).unwrap();
    let vocab = build_vocab(&data.captions, &data.train, &cfg).unwrap();
    let params = init_params(&cfg, &vocab, strategy).unwrap();
    (cfg, data, vocab, params)
}

fn align_cfg(cfg: &RunConfig, strategy: FusionStrategy) -> TrainConfig {
    TrainConfig::align(strategy, cfg.train.align_lr0, cfg.train.batch_size, cfg.train.align_epochs, 1)
}

fn ground_cfg(cfg: &RunConfig, strategy: FusionStrategy) -> TrainConfig {
    TrainConfig::ground(strategy, cfg.train.ground_lr0, cfg.train.batch_size, cfg.train.ground_epochs, 2)
}

fn same<T: NamedTensors<f32>>(a: &T, b: &T) -> bool {
    a.named()
        .iter()
        .zip(b.named())
        .all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn align_stage_only_moves_the_adapter() {
    let (cfg, data, vocab, params) = setup(FusionStrategy::Simof);
    let one_step = TrainConfig {
        epochs: 1,
        batch_size: data.captions.len(),
        ..align_cfg(&cfg, FusionStrategy::Simof)
    };
    let (stepped, log) = stage1_align(&data.captions, &params, &vocab, &one_step).unwrap();
    assert_eq!(log.step_losses.len(), 1);
    assert!(!same(&stepped.adapter, &params.adapter));

    let (after, log) = stage1_align(&data.captions, &params, &vocab, &align_cfg(&cfg, FusionStrategy::Simof)).unwrap();
    assert!(log.step_losses.iter().all(|l| l.is_finite()));
    assert!(same(&after.lm, &params.lm));
    assert!(same(&after.global, &params.global));
    assert!(same(&after.local, &params.local));
    assert!(!same(&after.adapter, &params.adapter));
}

#[test]
fn ground_stage_moves_adapter_and_language_model_only() {
    let (cfg, data, vocab, params) = setup(FusionStrategy::Simof);
    let (after, _) = stage2_ground(&data.train, &params, &vocab, &ground_cfg(&cfg, FusionStrategy::Simof)).unwrap();
    assert!(!same(&after.adapter, &params.adapter));
    assert!(!same(&after.lm, &params.lm));
    assert!(same(&after.global, &params.global));
    assert!(same(&after.local, &params.local));

    let frozen = TrainConfig {
        adapter_frozen: true,
        ..ground_cfg(&cfg, FusionStrategy::Simof)
    };
    let (after, _) = stage2_ground(&data.train, &params, &vocab, &frozen).unwrap();
    assert!(same(&after.adapter, &params.adapter));
    assert!(!same(&after.lm, &params.lm));
}

#[test]
fn global_only_never_produces_adapter_gradients() {
    let (_, data, vocab, params) = setup(FusionStrategy::GlobalOnly);
    let feats = encode_all(&params, &data.train[..1]).unwrap();
    let sample = &tokenize_all(&data.train[..1], &vocab, 64).unwrap()[0];
    let (_, grads) = params.sample_grads(&feats[0], sample).unwrap();
    assert!(grads.adapter.is_none());
    assert!(grads.lm.is_some());
}

#[test]
fn stage_and_config_errors() {
    let (cfg, data, vocab, params) = setup(FusionStrategy::Simof);
    let align = align_cfg(&cfg, FusionStrategy::Simof);
    assert!(matches!(stage1_align(&[], &params, &vocab, &align), Err(Error::Config(_))));
    assert!(matches!(
        stage2_ground(&data.train, &params, &vocab, &align),
        Err(Error::Config(_))
    ));
    let bad = TrainConfig {
        lm_frozen: false,
        ..align
    };
    assert!(bad.validate().is_err());
    let zero = TrainConfig { batch_size: 0, ..align };
    assert!(zero.validate().is_err());
    let other = align_cfg(&cfg, FusionStrategy::Cmof);
    assert!(matches!(stage1_align(&data.captions, &params, &vocab, &other), Err(Error::Config(_))));
    assert_eq!("ground".parse::<Stage>().unwrap(), Stage::Ground);
    assert!("both".parse::<Stage>().is_err());
    assert!("sideways".parse::<AdapterSchedule>().is_err());
}

#[test]
fn training_is_bitwise_deterministic() {
    let (cfg, data, vocab, params) = setup(FusionStrategy::Cmof);
    let run = || {
        let (p, _) = stage1_align(&data.captions, &params, &vocab, &align_cfg(&cfg, FusionStrategy::Cmof)).unwrap();
        let (p, log) = stage2_ground(&data.train, &p, &vocab, &ground_cfg(&cfg, FusionStrategy::Cmof)).unwrap();
        (Checkpoint::new(p, vocab.clone(), cfg.vision, cfg.lm, Some(Stage::Ground), 0).to_bytes().unwrap(), log)
    };
    assert_eq!(run(), run());
}

#[test]
fn epoch_loss_decreases() {
    let (cfg, data, vocab, params) = setup(FusionStrategy::Simof);
    let cfg = TrainConfig {
        epochs: 4,
        ..ground_cfg(&cfg, FusionStrategy::Simof)
    };
    let (_, log) = stage2_ground(&data.train, &params, &vocab, &cfg).unwrap();
    assert_eq!(log.epoch_losses.len(), 4);
    assert!(log.epoch_losses[3] < log.epoch_losses[0], "{:?}", log.epoch_losses);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (cfg, _, vocab, params) = setup(FusionStrategy::Simof);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ckpt = Checkpoint::new(params, vocab, cfg.vision, cfg.lm, Some(Stage::Align), 12);
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path, Some(FusionStrategy::Simof)).unwrap();
    assert_eq!(loaded, ckpt);
    let again = dir.path().join("b.ckpt");
    save_checkpoint(&again, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    assert!(matches!(
        load_checkpoint(&path, Some(FusionStrategy::Cmof)),
        Err(Error::Config(_))
    ));
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let (cfg, _, vocab, params) = setup(FusionStrategy::LocalOnly);
    let bytes = Checkpoint::new(params, vocab, cfg.vision, cfg.lm, None, 0).to_bytes().unwrap();
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));
}

#[test]
fn ablation_variants_respect_their_freeze_rules() {
    let (cfg, data, vocab, _) = setup(FusionStrategy::Simof);
    let data = AblationData {
        captions: data.captions,
        train: data.train,
        test: data.test,
        vocab,
    };
    let mut runner = AblationRunner::new(&data, &cfg).unwrap();
    let full = runner.run(FusionStrategy::Simof, AdapterSchedule::Full).unwrap();
    let no_refine = runner.run(FusionStrategy::Simof, AdapterSchedule::NoRefine).unwrap();
    let (aligned, _) = stage1_align(
        &data.captions,
        &init_params(&cfg, &data.vocab, FusionStrategy::Simof).unwrap(),
        &data.vocab,
        &TrainConfig {
            max_len: cfg.train.max_len,
            ..TrainConfig::align(
                FusionStrategy::Simof,
                cfg.train.align_lr0,
                cfg.train.batch_size,
                cfg.train.align_epochs,
                Rng::new(cfg.seed).split(201).seed(),
            )
        },
    )
    .unwrap();
    assert!(same(&no_refine.params.adapter, &aligned.adapter));
    assert!(!same(&full.params.adapter, &aligned.adapter));
    assert_eq!(full.logs.len(), 2);

    for schedule in AdapterSchedule::ALL {
        let report = runner.run(FusionStrategy::GlobalOnly, schedule).unwrap().report;
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert!(report.cider.is_finite() && report.bleu3.is_finite());
    }
    let report = run_ablation(FusionStrategy::LocalOnly, AdapterSchedule::NoPrealign, &data, &cfg).unwrap();
    assert_eq!(report.n_examples, data.test.len());
}
