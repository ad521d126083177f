mod common;

use std::fs;

use depthsal::data::{ClipSample, Split};
use depthsal::nn::BnMode;
use depthsal::scalar::Scalar;
use depthsal::tensor::Tensor;
use depthsal::training::*;
use depthsal::Error;

use common::*;

struct Oracle;

impl<S: Scalar> SaliencyPredictor<S> for Oracle {
    fn predict_maps(&self, samples: &[ClipSample<S>]) -> depthsal::Result<Vec<Vec<S>>> {
        Ok(samples.iter().map(|s| s.gt.continuous.clone()).collect())
    }
}

#[test]
fn oracle_predictor_scores_perfect_cc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("RGB16SC", 4, synth(dir.path(), 2, 16, 1, None));
    let report = evaluate::<f32>(&Oracle, &videos(&cfg), Split::Train, &cfg, 4).unwrap();
    assert_eq!(report.frames.len(), 4);
    for f in &report.frames {
        assert!((f.cc.unwrap() - 1.0).abs() < 1e-6, "{f:?}");
    }
}

#[test]
fn accumulation_matches_one_large_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config("Depth16SC", 4, synth(dir.path(), 2, 32, 3, None));
    cfg.train.bn_mode = BnMode::Running;
    cfg.train.effective_batch = 8;
    cfg.train.lr_backbone = 1e-4;
    cfg.train.lr_heads = 1e-4;
    cfg.train.flip_p = 0.0;
    let run = |micro: usize| {
        let mut c = cfg.clone();
        c.train.micro_batch = micro;
        let mut t = Trainer::<f64>::new(c.clone(), model(&c), videos(&c), None).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        for _ in 0..10 {
            t.optimizer_step(0, &batch).unwrap();
        }
        t.model.params
    };
    let (a, b) = (run(4), run(8));
    let mut worst = 0.0f64;
    for id in a.ids() {
        for (x, y) in a.value(id).data().iter().zip(b.value(id).data()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-3));
        }
    }
    assert!(worst < 1e-5, "max relative deviation {worst}");
}

#[test]
fn resumed_run_reproduces_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config("RGB16SC", 4, synth(dir.path(), 2, 16, 5, None));
    cfg.train.total_epochs = 2;
    cfg.train.lr_milestones = vec![1];
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));

    let mut t = Trainer::<f32>::new(cfg.clone(), model(&cfg), videos(&cfg), Some(full.clone())).unwrap();
    t.run().unwrap();
    assert!(full.join(epoch_checkpoint_name(0)).exists());
    assert!(full.join(epoch_checkpoint_name(1)).exists());
    assert!(full.join(BEST_CHECKPOINT).exists());

    let mut first = cfg.clone();
    first.train.max_steps = Some(2);
    let mut t = Trainer::<f32>::new(first, model(&cfg), videos(&cfg), Some(part.clone())).unwrap();
    t.run().unwrap();
    let mut t = Trainer::<f32>::new(cfg.clone(), model(&cfg), videos(&cfg), Some(part.clone())).unwrap();
    t.resume(&part.join(epoch_checkpoint_name(0))).unwrap();
    assert_eq!(t.next_epoch(), 1);
    t.run().unwrap();

    let (a, b) = (read_log(&full.join(LOG_FILE)).unwrap(), read_log(&part.join(LOG_FILE)).unwrap());
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert_eq!(a[2].lr_backbone, cfg.train.lr_backbone * 0.1);
    assert_eq!(a[3].deep_sup_weight, 0.5);
}

#[test]
fn numeric_fault_names_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("RGB16SC", 4, synth(dir.path(), 1, 16, 2, None));
    let mut m = model::<f32>(&cfg);
    let id = m.params.find("rgb.backbone.conv1.weight").unwrap();
    let shape = m.params.value(id).shape().to_vec();
    m.params.set(id, Tensor::full(&shape, f32::NAN)).unwrap();
    let mut t = Trainer::new(cfg.clone(), m, videos(&cfg), Some(dir.path().join("out"))).unwrap();
    match t.run() {
        Err(Error::Numeric { layer }) => {
            assert!(layer.contains("rgb.backbone"), "{layer}");
            assert!(layer.contains("batch clip_0000:"), "{layer}");
        }
        other => panic!("expected a numeric fault, got {other:?}"),
    }
    assert!(!dir.path().join("out").join(epoch_checkpoint_name(0)).exists());
}

#[test]
fn checkpoint_of_other_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("RGB16SC", 4, synth(dir.path(), 1, 16, 2, None));
    let m = model::<f32>(&cfg);
    let path = dir.path().join("ckpt");
    let opt = Sgd::new(m.params.len(), 0.9, 0.0);
    let meta = CheckpointMeta {
        epoch: 0,
        step: 0,
        variant: cfg.model.variant(),
        dtype: "f32".into(),
        best_val_cc: None,
        best_epoch: None,
        config: cfg.snapshot(),
    };
    save_checkpoint(&path, &m, &opt, &meta).unwrap();

    let other = small_config("RGBD16SC", 4, cfg.data.manifests[0].clone());
    let mut target = model::<f32>(&other);
    match load_model_weights(&mut target, &path) {
        Err(Error::Incompatible { mismatches }) => assert!(mismatches.iter().any(|m| m.contains("depth.")), "{mismatches:?}"),
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn trainer_requires_depth_for_depth_variants() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 1, 16, 2, None);
    let text = fs::read_to_string(&manifest).unwrap();
    let no_depth: String = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split('\t').collect();
            if f.len() == 7 && !l.starts_with('#') && f[0] != "video_id" {
                f[2] = "-";
            }
            f.join("\t") + "\n"
        })
        .collect();
    fs::write(&manifest, no_depth).unwrap();
    let cfg = small_config("RGBD16SC", 4, manifest.clone());
    let err = Trainer::<f32>::new(cfg.clone(), model(&cfg), videos(&cfg), None).err().unwrap();
    assert!(err.to_string().contains("RGBD16SC"), "{err}");
    let rgb = small_config("RGB16SC", 4, manifest);
    assert!(Trainer::<f32>::new(rgb.clone(), model(&rgb), videos(&rgb), None).is_ok());
}

#[test]
fn loss_descends_over_early_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 2, 32, 8, None);
    let mut wins = Vec::new();
    for seed in 0..5 {
        let mut cfg = small_config("RGBD16MF_CLL", 4, manifest.clone());
        cfg.train.seed = seed;
        cfg.train.lr_backbone = 3e-3;
        cfg.train.lr_heads = 3e-3;
        let mut t = Trainer::<f32>::new(cfg.clone(), model(&cfg), videos(&cfg), None).unwrap();
        let losses: Vec<f64> = (0..4).map(|e| t.train_epoch(e).unwrap().mean_loss).collect();
        wins.push(losses[3] < losses[0]);
    }
    assert!(wins.iter().filter(|&&w| w).count() >= 4, "{wins:?}");
}
