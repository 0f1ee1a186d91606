mod common;

use std::fs;

use common::{tiny_config, tiny_dataset};
use mstnet::config::Ablation;
use mstnet::data::{generate, GeneratorConfig, Split};
use mstnet::nn::Ctx;
use mstnet::train::{train, train_run, Control, METRICS_HEADER};
use mstnet::{Checkpoint, Error, ModelConfig, ModelInput};

fn quick_config() -> ModelConfig {
    ModelConfig {
        epochs: 3,
        batch_size: 2,
        ..tiny_config()
    }
}

#[test]
fn reloaded_checkpoint_predicts_bitwise_identically() {
    let ds = tiny_dataset(1);
    let outcome = train(&quick_config(), &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
    let ckpt = outcome.final_checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), back.to_bytes());
    for s in &ds.samples {
        let a = ModelInput::<f32>::prepare(s, ds.schema(), &ckpt.normalizer).unwrap();
        let b = ModelInput::<f32>::prepare(s, ds.schema(), &back.normalizer).unwrap();
        let la = {
            let mut ctx = Ctx::eval(&ckpt.params);
            let l = ckpt.net.forward(&mut ctx, &a).unwrap();
            ctx.graph.value(l).data().to_vec()
        };
        let lb = {
            let mut ctx = Ctx::eval(&back.params);
            let l = back.net.forward(&mut ctx, &b).unwrap();
            ctx.graph.value(l).data().to_vec()
        };
        assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn training_is_reproducible() {
    let ds = tiny_dataset(2);
    let run = || train(&quick_config(), &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
    let losses = |o: &mstnet::train::TrainOutcome| o.log.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    let c = train(&ModelConfig { seed: 9, ..quick_config() }, &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
    assert_ne!(a.final_checkpoint.to_bytes(), c.final_checkpoint.to_bytes());
}

#[test]
fn callback_can_stop_early() {
    let ds = tiny_dataset(3);
    let cfg = ModelConfig { epochs: 50, ..quick_config() };
    let out = train(&cfg, &ds, &mut |rec, _| Ok(if rec.epoch == 1 { Control::Stop } else { Control::Continue })).unwrap();
    assert_eq!(out.log.epochs.len(), 2);
    assert_eq!(out.final_checkpoint.epoch, 1);
}

#[test]
fn run_directory_has_every_artifact() {
    let ds = tiny_dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    train_run(&quick_config(), &ds, dir.path(), &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    for f in ["config.toml", "metrics.csv", "log.txt", "best.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    let cfg = ModelConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg, quick_config());
    let ckpt = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    let ev = ckpt.evaluate_split(&ds, Split::Eval).unwrap();
    assert_eq!(ev.labels.len(), ds.split(Split::Eval).len());
}

#[test]
fn checkpoint_rejects_incompatible_dataset() {
    let ds = tiny_dataset(5);
    let out = train(&ModelConfig { epochs: 1, ..quick_config() }, &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
    let other = generate(&GeneratorConfig {
        n: 6,
        eeg_len: 20,
        eeg_channels: 2,
        volume: [8, 8, 8],
        class_freqs: [2, 3, 5],
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(out.final_checkpoint.evaluate_split(&other, Split::Eval), Err(Error::Incompatible(_))));
}

#[test]
fn frozen_feature_biases_stay_at_zero() {
    let ds = tiny_dataset(6);
    let cfg = Ablation::NoFeatureBiases.apply(&quick_config());
    let out = train(&cfg, &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
    let params = &out.final_checkpoint.params;
    assert!(params.iter().all(|p| !p.name.starts_with("tab.tok.num_bias") && !p.name.starts_with("tab.tok.cat_bias")));
    let full = train(&quick_config(), &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
    let d = cfg.d_model;
    let k = ds.schema().num_fields();
    assert_eq!(full.final_checkpoint.params.num_trainable() - params.num_trainable(), k * d);
}

#[test]
fn every_ablation_trains_and_emits_finite_losses() {
    let ds = tiny_dataset(7);
    for ab in Ablation::ALL {
        let cfg = ab.apply(&ModelConfig { epochs: 2, ..quick_config() });
        let out = train(&cfg, &ds, &mut |_, _| Ok(Control::Continue)).unwrap();
        assert!(out.log.epochs.iter().all(|e| e.train_loss.is_finite()), "{}", ab.label());
    }
}
