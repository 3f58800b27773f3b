use avloc_core::datamodel::{
    load_manifest, Dataset, ImageNormalization, Polarity, SampleRecord, Split,
};
use avloc_core::encoders::{Backends, ToyConfig};
use avloc_core::evaluation::{evaluate, AnnotationKind};
use avloc_core::inference::InferenceConfig;
use avloc_core::synth::{planted_pairs, write_planted, PlantedConfig};
use avloc_core::training::{
    epoch_checkpoint_name, prepare_dataset, train, Checkpoint, TrainConfig, Trainer,
};
use avloc_core::Localizer;

fn planted_cfg() -> PlantedConfig {
    PlantedConfig {
        pairs: 16,
        image_size: 32,
        duration_secs: 1.0,
        normalization: ImageNormalization::CENTERED,
        ..PlantedConfig::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

struct World {
    dir: tempfile::TempDir,
    cfg: PlantedConfig,
    backends: Backends,
}

fn world(kind: AnnotationKind) -> World {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted_cfg();
    let toy = ToyConfig::default();
    let pairs = planted_pairs(&cfg, &toy).unwrap();
    write_planted(dir.path(), &pairs, &cfg, kind).unwrap();
    let backends = Backends::toy(&toy, cfg.image_size, cfg.sample_rate).unwrap();
    World { dir, cfg, backends }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let w = world(AnnotationKind::Boxes);
    let ds = load_manifest(w.dir.path().join("manifest.jsonl"), Split::Train).unwrap();
    let samples =
        prepare_dataset(&ds, &w.cfg.audio_prep(), &w.cfg.image_prep(), &w.backends).unwrap();
    let ckpts = w.dir.path().join("ckpt");
    std::fs::create_dir_all(&ckpts).unwrap();

    let mut full_log = Vec::new();
    let full = train(train_cfg(), &w.backends, &samples, Some(&ckpts), &mut |r| {
        full_log.push(*r);
        Ok(())
    })
    .unwrap();

    let mid = Checkpoint::load(ckpts.join(epoch_checkpoint_name(1))).unwrap();
    assert_eq!(mid.epoch, 1);
    let mut resumed_log = Vec::new();
    let mut trainer = Trainer::resume(&mid, &w.backends, &samples).unwrap();
    let resumed = trainer
        .run(
            &mut |r| {
                resumed_log.push(*r);
                Ok(())
            },
            &mut |_| Ok(()),
        )
        .unwrap();

    assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());
    let tail: Vec<_> = full_log.iter().filter(|r| r.epoch >= 1).copied().collect();
    assert_eq!(resumed_log, tail);
}

#[test]
fn resume_rejects_other_backends() {
    let w = world(AnnotationKind::Boxes);
    let ds = load_manifest(w.dir.path().join("manifest.jsonl"), Split::Train).unwrap();
    let samples =
        prepare_dataset(&ds, &w.cfg.audio_prep(), &w.cfg.image_prep(), &w.backends).unwrap();
    let trainer = Trainer::new(train_cfg(), &w.backends, &samples).unwrap();
    let ck = trainer.checkpoint();
    let other = Backends::toy(
        &ToyConfig {
            seed: 9,
            ..ToyConfig::default()
        },
        32,
        16_000,
    )
    .unwrap();
    assert!(Trainer::resume(&ck, &other, &samples).is_err());
    assert!(Localizer::from_checkpoint(&ck, &other, InferenceConfig::default()).is_err());
}

#[test]
fn evaluation_dispatches_on_annotations_and_polarity() {
    let boxes = world(AnnotationKind::Boxes);
    let ds = load_manifest(boxes.dir.path().join("manifest.jsonl"), Split::Test).unwrap();
    let samples = prepare_dataset(
        &ds,
        &boxes.cfg.audio_prep(),
        &boxes.cfg.image_prep(),
        &boxes.backends,
    )
    .unwrap();
    let mut trainer = Trainer::new(train_cfg(), &boxes.backends, &samples).unwrap();
    let ck = trainer.run(&mut |_| Ok(()), &mut |_| Ok(())).unwrap();
    let loc = Localizer::from_checkpoint(&ck, &boxes.backends, InferenceConfig::default()).unwrap();
    let (audio, image) = (boxes.cfg.audio_prep(), boxes.cfg.image_prep());

    let report = evaluate(&loc, &ds, &audio, &image).unwrap();
    let keys: Vec<&str> = report.metrics.keys().map(String::as_str).collect();
    assert_eq!(report.samples_evaluated, 16);
    assert!(keys.contains(&"cIoU") && keys.contains(&"AUC"));
    assert!(!keys.contains(&"mIoU") && !keys.contains(&"AP"));

    let mut records = ds.records.clone();
    for r in ds.records.iter().take(4) {
        records.push(SampleRecord {
            id: format!("{}_silent", r.id),
            annotation: None,
            polarity: Polarity::NonAudible,
            ..r.clone()
        });
    }
    let mixed = Dataset::new(records, Split::Test, boxes.dir.path()).unwrap();
    let report = evaluate(&loc, &mixed, &audio, &image).unwrap();
    for k in ["cIoU", "AUC", "AP", "max-F1", "LocAcc"] {
        assert!(report.metrics.contains_key(k), "missing {k}");
    }
    assert_eq!(report.per_sample.len(), 20);

    let masks = world(AnnotationKind::Mask);
    let ds = load_manifest(masks.dir.path().join("manifest.jsonl"), Split::Test).unwrap();
    let report = evaluate(&loc, &ds, &audio, &image).unwrap();
    assert!(report.metrics.contains_key("mIoU") && report.metrics.contains_key("F-score"));
    assert!(!report.metrics.contains_key("cIoU"));
}
