use std::collections::BTreeSet;

use neurogen::config::RunConfig;
use neurogen::container::{self, Header};
use neurogen::data::{self, Dataset, GenerateOptions};
use neurogen::encoder::Autoencoder;
use neurogen::train::{self, derive_seed, streams};

fn quick(stage1: usize, pretrain: usize, finetune: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stage1.epochs = stage1;
    cfg.stage2.pretrain_epochs = pretrain;
    cfg.stage2.epochs = finetune;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = data::generate(&GenerateOptions::default()).unwrap();
    d.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, d.manifest);
    assert_eq!(back.windows, d.windows);
    assert_eq!(back.anchors, d.anchors);
    assert_eq!(back.latents, d.latents);
    assert_eq!(back.latent_anchors, d.latent_anchors);
}

#[test]
fn generation_is_deterministic_and_splits_are_stratified() {
    let o = GenerateOptions::default();
    let a = data::generate(&o).unwrap();
    let b = data::generate(&o).unwrap();
    assert_eq!(a.windows, b.windows);
    let other = data::generate(&GenerateOptions {
        seed: 8,
        ..o.clone()
    })
    .unwrap();
    assert_ne!(a.windows, other.windows);

    let s = &a.manifest.splits;
    let all: BTreeSet<usize> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .copied()
        .collect();
    assert_eq!(all.len(), a.windows.len());
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), a.windows.len());
    for split in [&s.train, &s.val, &s.test] {
        let mut counts = vec![0usize; o.classes];
        split.iter().for_each(|&i| counts[a.windows[i].label] += 1);
        assert!(counts.iter().all(|&c| c == counts[0]), "{counts:?}");
    }
    assert_eq!(s.train.len(), 16 * o.classes);
}

#[test]
fn checkpoints_restore_bit_exact_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let a = Autoencoder::new(cfg.encoder(), 3).unwrap();
    let path = dir.path().join("m.ckpt");
    container::save_checkpoint(a.params.as_map(), &Header::default(), &path).unwrap();
    let mut b = Autoencoder::new(cfg.encoder(), 4).unwrap();
    assert!(!train::changed_params(a.params.as_map(), b.params.as_map()).is_empty());
    b.params
        .load_from(&container::load_checkpoint(&path).unwrap().1, "")
        .unwrap();
    assert!(train::changed_params(a.params.as_map(), b.params.as_map()).is_empty());

    let mut wrong = RunConfig::default();
    wrong.data.width = 16;
    let mut c = Autoencoder::new(wrong.encoder(), 4).unwrap();
    assert!(c
        .params
        .load_from(&container::load_checkpoint(&path).unwrap().1, "")
        .is_err());
}

#[test]
fn stage1_metrics_are_reproducible() {
    let cfg = quick(2, 0, 0);
    let d = data::generate(&cfg.data).unwrap();
    let a = train::train_stage1(&cfg, &d).unwrap();
    let b = train::train_stage1(&cfg, &d).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert!(a.log.to_csv().starts_with("epoch,metric,value\n"));
}

#[test]
fn reconstruction_alone_lowers_mse() {
    let mut cfg = quick(8, 0, 0);
    cfg.loss.align = 0.0;
    cfg.loss.contrastive = 0.0;
    let d = data::generate(&cfg.data).unwrap();
    let init =
        Autoencoder::new(cfg.encoder(), derive_seed(cfg.seed, streams::ENCODER_INIT)).unwrap();
    let val = &d.manifest.splits.val;
    let before = train::evaluate_stage1(&init, &d, val).unwrap().mse;
    let r = train::train_stage1(&cfg, &d).unwrap();
    assert!(
        r.final_eval.mse < before,
        "{} vs {before}",
        r.final_eval.mse
    );
}

#[test]
fn stage2_respects_the_mask_and_lowers_the_loss() {
    let cfg = quick(2, 30, 30);
    let d = data::generate(&cfg.data).unwrap();
    let enc = train::train_stage1(&cfg, &d).unwrap().model;
    let enc_before = enc.params.as_map().clone();
    let r = train::train_stage2(&cfg, &d, &enc).unwrap();
    assert!(train::changed_params(&enc_before, enc.params.as_map()).is_empty());
    let changed = train::changed_params(r.base.params.as_map(), r.model.params.as_map());
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| r.mask.contains(n)), "{changed:?}");
    for metric in ["pretrain_v_loss", "v_loss"] {
        let s = r.log.series(metric);
        assert_eq!(s.len(), 30);
        let (head, tail) = (mean(&s[..10]), mean(&s[s.len() - 10..]));
        assert!(tail < head, "{metric}: {head} -> {tail}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = RunConfig::default();
    cfg.stage1.batch_size = 1;
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::default();
    cfg.stage2.drop_prob = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::default();
    cfg.sampler.steps = 5000;
    assert!(cfg.validate().is_err());
    let json = RunConfig::default().to_json().unwrap();
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, RunConfig::default());
}
