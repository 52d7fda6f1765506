mod common;

use std::path::Path;

use tashr_core::losses::weighted_total;
use tashr_core::nets::{ModelBundle, NetsConfig};
use tashr_core::trainer::{
    batch_indices, discriminator_step, epoch_order, generator_forward, generator_terms, load_checkpoint, read_loss_log,
    run_training, save_checkpoint, train_step, Batch, CheckpointMeta, Providers, RunLayout, TrainConfig,
    CHECKPOINT_FILES, LOSS_LOG_HEADER,
};
use tashr_core::ErrorClass;
use tashr_tensor::Tape;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        image_size: 64,
        max_steps: 3,
        checkpoint_every: 2,
        seed: 4,
        nets: NetsConfig::uniform(4),
        ..TrainConfig::default()
    }
}

fn csv_without_wall_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_config();
    let data = common::overfit_set(2, 64);
    let mut t = tashr_core::trainer::Trainer::<f32>::new(cfg.clone()).unwrap();
    t.train_on(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut expected: Vec<String> = CHECKPOINT_FILES.iter().map(|s| s.to_string()).collect();
    expected.sort();
    assert_eq!(names, expected);
    assert_eq!(names.iter().filter(|n| n.ends_with(".safetensors")).count(), 3);

    let (loaded, meta) = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(loaded, t.bundle);
    assert_eq!(meta.step, 1);

    // one more step from the loaded state equals one more step in memory
    let mut resumed = tashr_core::trainer::Trainer::<f32>::resume(cfg, dir.path()).unwrap();
    let a = t.train_on(&data).unwrap();
    let b = resumed.train_on(&data).unwrap();
    assert_eq!(a, b);
    assert_eq!(t.bundle, resumed.bundle);
}

#[test]
fn mismatched_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = ModelBundle::<f32>::new(NetsConfig::uniform(4), 0).unwrap();
    save_checkpoint(dir.path(), &bundle, &CheckpointMeta::new(&bundle, None, None)).unwrap();
    let wider = TrainConfig {
        nets: NetsConfig::uniform(8),
        ..tiny_config()
    };
    let err = tashr_core::trainer::Trainer::<f32>::resume(wider, dir.path()).err().unwrap();
    assert_eq!(err.class(), ErrorClass::Data);

    // a meta file that lies about the widths fails against the tensors
    let meta_path = dir.path().join("meta.json");
    let text = std::fs::read_to_string(&meta_path).unwrap();
    std::fs::write(&meta_path, text.replace("\"base_channels\": 4", "\"base_channels\": 8")).unwrap();
    let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    assert!(err.to_string().contains("shape") || err.to_string().contains("expected"), "{err}");
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let cfg = tiny_config();
    let data = common::overfit_set(3, 64);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_training(&cfg, &data, a.path(), false).unwrap();
    run_training(&cfg, &data, b.path(), false).unwrap();
    let log_a = csv_without_wall_time(&RunLayout::new(a.path()).loss_log);
    assert_eq!(log_a.len(), 4);
    assert_eq!(log_a[0], LOSS_LOG_HEADER.rsplit_once(',').unwrap().0);
    assert_eq!(log_a, csv_without_wall_time(&RunLayout::new(b.path()).loss_log));

    // stop after the step-2 checkpoint, then resume to 3
    let first = TrainConfig { max_steps: 2, ..cfg.clone() };
    run_training(&first, &data, c.path(), false).unwrap();
    let resumed = run_training(&cfg, &data, c.path(), true).unwrap();
    assert_eq!(resumed.step(), 3);
    assert_eq!(log_a, csv_without_wall_time(&RunLayout::new(c.path()).loss_log));
    let (final_a, _) = load_checkpoint::<f32>(RunLayout::new(a.path()).checkpoint).unwrap();
    assert_eq!(final_a, resumed.bundle);
}

#[test]
fn resume_drops_log_rows_past_the_checkpoint() {
    let cfg = TrainConfig {
        checkpoint_every: 2,
        max_steps: 3,
        ..tiny_config()
    };
    let data = common::overfit_set(2, 64);
    let dir = tempfile::tempdir().unwrap();
    run_training(&cfg, &data, dir.path(), false).unwrap();
    // pretend the run died after logging step 3 but before its checkpoint
    let layout = RunLayout::new(dir.path());
    let (bundle, _) = load_checkpoint::<f32>(&layout.checkpoint).unwrap();
    assert_eq!(bundle.step, 3);
    let mut t = tashr_core::trainer::Trainer::<f32>::new(cfg.clone()).unwrap();
    t.train_on(&data).unwrap();
    t.train_on(&data).unwrap();
    t.save(&layout.checkpoint).unwrap();
    run_training(&cfg, &data, dir.path(), true).unwrap();
    let rows = read_loss_log(&layout.loss_log).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn max_steps_zero_saves_the_initial_state() {
    let cfg = TrainConfig { max_steps: 0, ..tiny_config() };
    let data = common::overfit_set(1, 64);
    let dir = tempfile::tempdir().unwrap();
    let t = run_training(&cfg, &data, dir.path(), false).unwrap();
    assert_eq!(t.step(), 0);
    let (b, _) = load_checkpoint::<f32>(RunLayout::new(dir.path()).checkpoint).unwrap();
    assert_eq!(b, ModelBundle::new(cfg.nets, cfg.seed).unwrap());
    assert!(read_loss_log(RunLayout::new(dir.path()).loss_log).unwrap().is_empty());
}

#[test]
fn wrongly_sized_samples_are_rejected() {
    let cfg = tiny_config();
    let data = common::overfit_set(1, 128);
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&cfg, &data, dir.path(), false).err().unwrap();
    assert_eq!(err.class(), ErrorClass::Data);
    let bad = TrainConfig { image_size: 96, ..tiny_config() };
    assert_eq!(bad.validate().unwrap_err().class(), ErrorClass::Config);
}

fn batch_of(n: usize) -> Batch<f64> {
    let data = common::overfit_set(n, 64);
    let refs: Vec<_> = data.iter().collect();
    Batch::from_triplets(&refs, 64).unwrap()
}

#[test]
fn removal_losses_do_not_reach_the_detection_net_when_detached() {
    let cfg = tiny_config();
    let bundle = ModelBundle::<f64>::new(cfg.nets, 1).unwrap();
    let providers = Providers::<f64>::build(&cfg.losses).unwrap();
    let batch = batch_of(2);
    for detach in [true, false] {
        let tape = Tape::new();
        let pass = generator_forward(&tape, &bundle, &batch.highlight, detach).unwrap();
        let terms = generator_terms(&pass, &bundle, &providers, &batch, cfg.tv_mode, true).unwrap();
        let removal_only = terms
            .pixel
            .add(terms.feature)
            .unwrap()
            .add(terms.gan_g.scale(0.01))
            .unwrap()
            .add(terms.text.unwrap())
            .unwrap();
        let grads = pass.detection.gradients(&removal_only.backward().unwrap());
        let all_zero = grads.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0));
        assert_eq!(all_zero, detach);
    }
}

#[test]
fn each_update_touches_only_its_own_networks() {
    let cfg = tiny_config();
    let providers = Providers::<f64>::build(&cfg.losses).unwrap();
    let before = providers.clone();
    let batch = batch_of(2);
    let start = ModelBundle::<f64>::new(cfg.nets, 2).unwrap();

    let fake = {
        let tape = Tape::new();
        let pass = generator_forward(&tape, &start, &batch.highlight, true).unwrap();
        (*pass.image_out.value()).clone()
    };
    let mut d_only = start.clone();
    discriminator_step(&mut d_only, &cfg, &batch.clean, &fake).unwrap();
    assert_eq!(d_only.detection, start.detection);
    assert_eq!(d_only.removal, start.removal);
    assert_ne!(d_only.discriminator, start.discriminator);

    let mut full = start.clone();
    train_step(&mut full, &providers, &cfg, &batch).unwrap();
    assert_eq!(full.discriminator, d_only.discriminator);
    assert_eq!(full.spectral, d_only.spectral);
    assert_ne!(full.detection, start.detection);
    assert_ne!(full.removal, start.removal);
    assert_eq!(full.step, 1);

    assert_eq!(providers.perceptual, before.perceptual);
    assert_eq!(providers.text_detection, before.text_detection);
    assert_eq!(providers.text_recognition, before.text_recognition);
}

#[test]
fn ablation_zeroes_the_text_term() {
    let cfg = TrainConfig {
        text_loss_enabled: false,
        ..tiny_config()
    };
    let providers = Providers::<f64>::build(&cfg.losses).unwrap();
    let mut bundle = ModelBundle::<f64>::new(cfg.nets, 3).unwrap();
    let l = train_step(&mut bundle, &providers, &cfg, &batch_of(2)).unwrap();
    assert_eq!(l.l_text, 0.0);
    assert_eq!(l.total, weighted_total(l.l_netd, l.l_pixel, l.l_feature, l.l_gan_g, 0.0));
}

#[test]
fn schedule_is_a_seeded_permutation_per_epoch() {
    let order = epoch_order(7, 0, 10);
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(order, epoch_order(7, 0, 10));
    assert_ne!(order, epoch_order(7, 1, 10));
    // step 2 with batch 4 covers epoch positions 8, 9 and then 0, 1 of the next epoch
    let b = batch_indices(7, 2, 4, 10);
    assert_eq!(b[..2], order[8..]);
    assert_eq!(b[2..], epoch_order(7, 1, 10)[..2]);
}
