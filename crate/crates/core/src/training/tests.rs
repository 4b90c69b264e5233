use std::path::Path;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;

use super::data::{IMAGE_LEN, RECORD_LEN};
use super::*;
use crate::backbones::{build_network, ArchSpec, AttentionKind};
use crate::error::Error;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::testing::rng;

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 30, 0.1).unwrap(), 0.1);
    assert_abs_diff_eq!(cosine_lr(30, 30, 0.1).unwrap(), 0.0, epsilon = 1e-18);
    assert_abs_diff_eq!(cosine_lr(15, 30, 0.1).unwrap(), 0.05, epsilon = 1e-15);
    assert!(matches!(cosine_lr(31, 30, 0.1), Err(Error::Range(_))));
    let lrs: Vec<f64> = (0..=30).map(|t| cosine_lr(t, 30, 0.1).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn sgd_step_cases() {
    let mut p = vec![1.0, -2.0];
    let mut v = vec![0.0; 2];
    sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.0, 0.0, 0.1).unwrap();
    assert_eq!(p, vec![0.95, -2.1]);

    let mut p = vec![1.0, -2.0];
    let mut v = vec![0.0; 2];
    sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.9, 0.0, 0.1).unwrap();
    assert_eq!(p, vec![1.0, -2.0]);

    // two steps, constant grad g, wd, momentum μ
    let (g, wd, mu, lr) = (0.5, 0.01, 0.9, 0.1);
    let mut p = vec![2.0];
    let mut v = vec![0.0];
    sgd_step(&mut p, &[g], &mut v, mu, wd, lr).unwrap();
    sgd_step(&mut p, &[g], &mut v, mu, wd, lr).unwrap();
    let v1 = g + wd * 2.0;
    let p1 = 2.0 - lr * v1;
    let v2 = mu * v1 + g + wd * p1;
    let p2 = p1 - lr * v2;
    assert_abs_diff_eq!(p[0], p2, epsilon = 1e-15);
    assert_abs_diff_eq!(v[0], v2, epsilon = 1e-15);

    let mut v = vec![0.0; 3];
    assert!(matches!(
        sgd_step(&mut [1.0f64; 2], &[0.0; 2], &mut v, 0.9, 0.0, 0.1),
        Err(Error::Registry(_))
    ));
}

#[test]
fn weight_decay_only_on_weights() {
    let mut store = ParamStore::<f64>::new();
    for (name, kind) in [
        ("w", ParamKind::Weight),
        ("b", ParamKind::Bias),
        ("g", ParamKind::Norm),
        ("m", ParamKind::Buffer),
    ] {
        store.register(name, kind, Tensor::full([3], 2.0)).unwrap();
    }
    store.entries_mut()[3].grad.data_mut().fill(5.0);
    let mut opt = Sgd::new(&store, 0.9, 0.1);
    opt.step(&mut store, 1.0).unwrap();
    let vals: Vec<f64> = store.entries().iter().map(|e| e.value.data()[0]).collect();
    assert_abs_diff_eq!(vals[0], 2.0 - 0.2, epsilon = 1e-15);
    assert_eq!(&vals[1..], &[2.0, 2.0, 2.0]);
}

#[test]
fn top_k_cases() {
    let eye = Tensor::<f64>::eye(10);
    let labels: Vec<usize> = (0..10).collect();
    assert_eq!(top_k_hits(&eye, &labels, 1), 10);
    assert_eq!(top_k_hits(&eye, &labels, 5), 10);

    let flat = Tensor::<f64>::zeros([6, 10]);
    let labels = [0, 0, 3, 7, 0, 9];
    assert_eq!(top_k_hits(&flat, &labels, 1), 3);
    // ties rank lower indices first, so only classes 0..5 make the top 5
    assert_eq!(top_k_hits(&flat, &labels, 5), 4);
}

fn top_k_oracle(row: &[f64], label: usize, k: usize) -> bool {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx[..k].contains(&label)
}

proptest! {
    #[test]
    fn top_k_matches_sort_oracle(seed in 0u64..100_000, k in 1usize..6) {
        let mut r = rng(seed);
        // coarse values force ties
        let logits = Tensor::from_fn([8, 10], |_| r.gen_range(0..4) as f64);
        let labels: Vec<usize> = (0..8).map(|_| r.gen_range(0..10)).collect();
        let want = (0..8).filter(|&i| top_k_oracle(&logits.data()[i * 10..(i + 1) * 10], labels[i], k)).count();
        prop_assert_eq!(top_k_hits(&logits, &labels, k), want);
    }
}

fn write_batch(path: &Path, records: usize, f: impl Fn(usize) -> (u8, u8)) {
    let mut bytes = Vec::with_capacity(records * RECORD_LEN);
    for r in 0..records {
        let (label, px) = f(r);
        bytes.push(label);
        bytes.extend(std::iter::repeat_n(px, IMAGE_LEN));
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn cifar_batch_reading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.bin");
    write_batch(&path, 10_000, |r| ((r % 10) as u8, 51));
    let norm = CIFAR10_NORMALIZATION;
    let (images, labels) = data::read_batch(&path, usize::MAX, &norm).unwrap();
    assert_eq!(labels.len(), 10_000);
    assert_eq!(images.len(), 10_000 * 3 * 32 * 32);
    assert_eq!(labels[13], 3);
    let plane = 32 * 32;
    for c in 0..3 {
        let want = (51.0f32 / 255.0 - norm.mean[c]) / norm.std[c];
        assert_eq!(images[c * plane], want);
        assert_eq!(images[c * plane + plane - 1], want);
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    match data::read_batch(&path, usize::MAX, &norm) {
        Err(Error::Format { detail, .. }) => {
            assert!(
                detail.contains("30730000") && detail.contains("30729900"),
                "{detail}"
            );
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn cifar_directory_loading() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_cifar(dir.path(), 10_000, 3).unwrap();
    let limits = CifarLimits {
        train: Some(12_000),
        test: Some(500),
    };
    let (train, test) = load_cifar10(dir.path(), limits, &CIFAR10_NORMALIZATION).unwrap();
    assert_eq!(train.len(), 12_000);
    assert_eq!(test.len(), 500);
    assert_eq!(train.split, Split::Train);
    assert!(train.labels().iter().all(|&l| l < 10));
    let (again, _) = load_cifar10(dir.path(), limits, &CIFAR10_NORMALIZATION).unwrap();
    assert_eq!(train.image(11_999), again.image(11_999));
    std::fs::remove_file(dir.path().join("data_batch_4.bin")).unwrap();
    assert!(matches!(
        load_cifar10(dir.path(), limits, &CIFAR10_NORMALIZATION),
        Err(Error::Io { .. })
    ));
}

#[test]
fn bad_label_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.bin");
    write_batch(&path, 10_000, |r| (if r == 5 { 10 } else { 1 }, 0));
    assert!(matches!(
        data::read_batch(&path, usize::MAX, &CIFAR10_NORMALIZATION),
        Err(Error::Format { .. })
    ));
}

#[test]
fn augmentation_cases() {
    let mut r = rng(1);
    let img: Vec<f32> = (0..IMAGE_LEN).map(|_| r.gen_range(-1.0..1.0)).collect();
    assert_eq!(augment_with(&img, 4, 4, false), img);
    assert_eq!(
        augment_with(&augment_with(&img, 4, 4, true), 4, 4, true),
        img
    );
    let shifted = augment_with(&img, 0, 8, false);
    // output (y, x) reads source (y − 4, x + 4); outside the source is padding
    assert_eq!(shifted[32 * 5 + 3], img[32 + 7]);
    assert_eq!(shifted[32 * 5 + 28], 0.0);
    assert_eq!(shifted[32 * 2 + 10], 0.0);
    let mut g = rng(7);
    let a: Vec<Vec<f32>> = (0..4).map(|_| augment(&img, &mut g)).collect();
    let mut g = rng(7);
    let b: Vec<Vec<f32>> = (0..4).map(|_| augment(&img, &mut g)).collect();
    assert_eq!(a, b);
}

#[test]
fn config_json_contract() {
    let cfg = TrainConfig::default();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&json).unwrap(), cfg);
    assert!(TrainConfig::from_json(&json.replace("}", ",\"extra\":1}")).is_err());
    let partial = TrainConfig::from_json(r#"{"lr0":0.4,"epochs":2}"#).unwrap();
    assert_eq!(
        partial,
        TrainConfig {
            lr0: 0.4,
            epochs: 2,
            ..cfg.clone()
        }
    );
    assert!(TrainConfig::from_json(r#"{"batch_size":0}"#).is_err());
    assert_abs_diff_eq!(
        TrainConfig {
            batch_size: 64,
            ..cfg.clone()
        }
        .effective_lr0(),
        0.025
    );
    assert!(TrainConfig {
        batch_size: 1,
        ..cfg
    }
    .validate()
    .is_err());
}

/// Two classes with opposite constant images plus small noise.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        images.extend((0..IMAGE_LEN).map(|_| sign + r.gen_range(-0.1f32..0.1)));
        labels.push(label);
    }
    Dataset::new(images, labels, 2, Split::Train).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lr0: 0.4,
        batch_size: 16,
        epochs: 1,
        ..TrainConfig::default()
    }
}

fn two_class_arch() -> ArchSpec {
    let mut a = ArchSpec::resnet20();
    a.num_classes = 2;
    a
}

#[test]
fn smoke_training_reduces_loss() {
    let data = separable(64, 1);
    let mut net = build_network::<f32>(&two_class_arch(), AttentionKind::Ba, 0).unwrap();
    let opts = TrainOptions {
        augment: false,
        checkpoint: None,
    };
    let h = train(&mut net, &data, &data.take(16), &small_config(), &opts).unwrap();
    assert_eq!(h.epochs.len(), 1);
    assert_eq!(h.step_losses.len(), 4);
    assert_eq!(h.initial_loss, h.step_losses[0]);
    assert!(h.step_losses[3] < h.step_losses[0], "{:?}", h.step_losses);
}

#[test]
fn history_is_reproducible_and_tracks_schedule() {
    let data = separable(48, 2);
    let cfg = TrainConfig {
        epochs: 3,
        ..small_config()
    };
    let run = || {
        let mut net = build_network::<f32>(&two_class_arch(), AttentionKind::Se, 5).unwrap();
        train(
            &mut net,
            &data,
            &data.take(8),
            &cfg,
            &TrainOptions::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    for e in &a.epochs {
        assert_eq!(
            e.lr,
            cosine_lr(e.epoch - 1, 3, cfg.effective_lr0()).unwrap()
        );
    }
    assert_eq!(a.batch_hashes.len(), 9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    a.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,lr,train_loss,test_top1,test_top5\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn non_finite_loss_aborts() {
    let data = separable(32, 3);
    let mut net = build_network::<f32>(&two_class_arch(), AttentionKind::None, 0).unwrap();
    net.params_mut()
        .set("head.bias", Tensor::full([2], f32::NAN))
        .unwrap();
    match train(
        &mut net,
        &data,
        &data,
        &small_config(),
        &TrainOptions::default(),
    ) {
        Err(Error::NonFinite {
            epoch: 1,
            step: 0,
            value,
        }) => assert!(value.is_nan()),
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn checkpoint_written_at_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let data = separable(16, 4);
    let mut net = build_network::<f32>(&two_class_arch(), AttentionKind::Ba, 0).unwrap();
    let opts = TrainOptions {
        augment: true,
        checkpoint: Some(path.clone()),
    };
    train(&mut net, &data, &data, &small_config(), &opts).unwrap();
    let stored = crate::backbones::checkpoint::load(&path).unwrap();
    assert_eq!(stored.len(), net.params().len());
}

#[test]
fn evaluate_perfect_and_empty() {
    let data = separable(8, 5);
    let mut net = build_network::<f32>(&two_class_arch(), AttentionKind::None, 0).unwrap();
    let (t1, t5) = evaluate(&mut net, &data).unwrap();
    assert!((0.0..=1.0).contains(&t1));
    assert_eq!(t5, 1.0);
    assert_eq!(evaluate(&mut net, &data.take(0)).unwrap(), (0.0, 0.0));
}
