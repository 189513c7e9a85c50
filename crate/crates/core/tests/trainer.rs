use faceswap::archive::module_checksum;
use faceswap::backbone::{perceptual_from_spec, BackboneAdapter};
use faceswap::calibration::IfsrMargins;
use faceswap::generator::ModelConfig;
use faceswap::objectives::LossWeights;
use faceswap::pipeline::synthetic::SynthConfig;
use faceswap::pipeline::FaceStore;
use faceswap::trainer::{
    lr_at, read_metrics, series, DecayMode, OptimizerSpec, StepReport, TrainConfig, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
use faceswap::Error;

fn store() -> FaceStore<f64> {
    SynthConfig {
        identities: 4,
        per_identity: 3,
        resolution: 16,
        seed: 3,
    }
    .store()
}

fn margins() -> IfsrMargins {
    IfsrMargins::new((1..=8).map(|b| (b, 0.05)).collect(), 1, "test", "stub").unwrap()
}

fn tiny(preset: &str, config: TrainConfig, seed: u64) -> Trainer<f64> {
    let model = ModelConfig::preset_at(preset, 16, 4, 8).unwrap();
    Trainer::new(
        model,
        config,
        BackboneAdapter::from_spec("stub").unwrap(),
        perceptual_from_spec("stub").unwrap(),
        Some(margins()),
        seed,
    )
    .unwrap()
}

fn small_batch() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        ..TrainConfig::desk()
    }
}

fn losses(reports: &[StepReport]) -> Vec<(Vec<(String, u64)>, Option<Vec<(String, u64)>>)> {
    let bits = |m: &std::collections::BTreeMap<String, f64>| m.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect();
    reports.iter().map(|r| (bits(&r.g.terms), r.d.as_ref().map(|d| bits(&d.terms)))).collect()
}

#[test]
fn staircase_schedule() {
    let spec = OptimizerSpec::default();
    assert_eq!(lr_at(0, &spec), 1e-4);
    assert_eq!(lr_at(99_999, &spec), 1e-4);
    assert_eq!(lr_at(100_000, &spec), 1e-4 * 0.97);
    assert_eq!(lr_at(250_000, &spec), 1e-4 * 0.97 * 0.97);
    let smooth = OptimizerSpec {
        decay_mode: DecayMode::Continuous,
        ..spec
    };
    assert!(lr_at(50_000, &smooth) < 1e-4 && lr_at(50_000, &smooth) > 1e-4 * 0.97);
}

#[test]
fn same_seed_same_losses() {
    let s = store();
    let a = tiny("configB", small_batch(), 5).run(&s, 3, None).unwrap();
    let b = tiny("configB", small_batch(), 5).run(&s, 3, None).unwrap();
    assert_eq!(losses(&a), losses(&b));
    let c = tiny("configB", small_batch(), 6).run(&s, 3, None).unwrap();
    assert_ne!(losses(&a), losses(&c));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = store();
    let dir = tempfile::tempdir().unwrap();
    let full = tiny("configC", small_batch(), 9).run(&s, 4, None).unwrap();

    let mut first = tiny("configC", small_batch(), 9);
    let head = first.run(&s, 2, Some(dir.path())).unwrap();
    let ckpt = dir.path().join("step2.safetensors");
    std::fs::copy(dir.path().join(CHECKPOINT_FILE), &ckpt).unwrap();
    let mut resumed = Trainer::<f64>::load_checkpoint(
        &ckpt,
        BackboneAdapter::from_spec("stub").unwrap(),
        perceptual_from_spec("stub").unwrap(),
    )
    .unwrap();
    assert_eq!(resumed.step, 2);
    let tail = resumed.run(&s, 2, Some(dir.path())).unwrap();
    assert_eq!(losses(&full[..2]), losses(&head));
    assert_eq!(losses(&full[2..]), losses(&tail));

    let logged = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(logged.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert_eq!(losses(&logged), losses(&full));

    let mut other = tiny("configC", small_batch(), 1);
    other.restore(&ckpt).unwrap();
    assert_eq!(losses(&other.run(&s, 2, None).unwrap()), losses(&full[2..]));
}

#[test]
fn corrupt_checkpoint_leaves_state_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = tiny("configB", small_batch(), 2);
    t.run(&store(), 1, None).unwrap();
    let before = module_checksum(&t.generator);

    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, b"not an archive").unwrap();
    assert!(matches!(t.restore(&bad), Err(Error::CheckpointCorrupt(_))));

    let good = dir.path().join("good.safetensors");
    t.save_checkpoint(&good).unwrap();
    let mut bytes = std::fs::read(&good).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&bad, &bytes).unwrap();
    assert!(t.restore(&bad).is_err());

    assert!(matches!(
        t.restore(&dir.path().join("missing.safetensors")),
        Err(Error::CheckpointNotFound(_))
    ));
    assert_eq!(module_checksum(&t.generator), before);
    assert_eq!(t.step, 1);
}

#[test]
fn checkpoint_from_another_backbone_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.safetensors");
    tiny("configB", small_batch(), 2).save_checkpoint(&path).unwrap();
    let other = BackboneAdapter::<f64>::from_spec("stub:99").unwrap();
    let r = Trainer::load_checkpoint(&path, other, perceptual_from_spec("stub").unwrap());
    assert!(matches!(r, Err(Error::ConfigMismatch(_))));
}

#[test]
fn frozen_networks_do_not_move() {
    let mut t = tiny("configD", small_batch(), 4);
    let bb = t.backbone().checksum();
    let perc = t.perceptual().checksum();
    t.run(&store(), 2, None).unwrap();
    assert_eq!(t.backbone().checksum(), bb);
    assert_eq!(t.perceptual().checksum(), perc);
}

#[test]
fn ifsr_variants_need_margins() {
    let model = ModelConfig::preset_at("configB", 16, 4, 8).unwrap();
    let r = Trainer::<f64>::new(
        model.clone(),
        small_batch(),
        BackboneAdapter::from_spec("stub").unwrap(),
        perceptual_from_spec("stub").unwrap(),
        None,
        0,
    );
    assert!(matches!(r, Err(Error::InvalidConfig(_))));
    let a = ModelConfig::preset_at("configA", 16, 4, 8).unwrap();
    let t = Trainer::<f64>::new(
        a,
        small_batch(),
        BackboneAdapter::from_spec("stub").unwrap(),
        perceptual_from_spec("stub").unwrap(),
        None,
        0,
    )
    .unwrap();
    assert!(t.margins.is_none());
}

#[test]
fn reconstruction_only_overfits_one_pair() {
    let weights = LossWeights {
        identity: 0.0,
        reconstruction: 1.0,
        perceptual: 0.0,
        cycle: 0.0,
        ifsr: 0.0,
        gp: 0.0,
        adversarial: 0.0,
        ..LossWeights::default()
    };
    let config = TrainConfig {
        batch_size: 1,
        same_prob: 1.0,
        weights,
        optimizer: OptimizerSpec {
            lr: 2e-3,
            ..OptimizerSpec::default()
        },
        ..TrainConfig::desk()
    };
    let mut t = tiny("configA", config, 0);
    let s = store();
    let face = s.faces().next().unwrap().clone();
    let pair = faceswap::pipeline::TrainingPair {
        target: face.clone(),
        source: face,
        is_same: true,
    };
    let reports: Vec<StepReport> = (0..150).map(|_| t.train_step(std::slice::from_ref(&pair)).unwrap()).collect();
    let rec = series(&reports, "rec");
    assert!(reports.iter().all(|r| r.d.is_none()));
    assert!(rec[rec.len() - 1] < 0.5 * rec[0], "{} -> {}", rec[0], rec[rec.len() - 1]);
}

