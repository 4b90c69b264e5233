use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::data::{augment, Dataset, IMAGE_LEN, IMAGE_SIDE};
use super::metrics::top_k_hits;
use super::schedule::cosine_lr;
use super::sgd::Sgd;
use crate::backbones::{checkpoint, Network};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::nn::Mode;
use crate::tensor::{Float, Tensor};

const EVAL_BATCH: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_top1: f64,
    pub test_top5: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Loss of the very first minibatch, before any update.
    pub initial_loss: f64,
    /// Loss of every minibatch, in training order.
    pub step_losses: Vec<f64>,
    /// Digest of the sample order of every minibatch, in training order.
    pub batch_hashes: Vec<String>,
}

impl History {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["epoch", "lr", "train_loss", "test_top1", "test_top5"],
            self.epochs.iter().map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:.8e}", e.lr),
                    format!("{:.8}", e.train_loss),
                    format!("{:.6}", e.test_top1),
                    format!("{:.6}", e.test_top5),
                ]
            }),
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub augment: bool,
    /// Written once training finishes.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            augment: true,
            checkpoint: None,
        }
    }
}

/// Data-order generator. Independent of weight initialization so every
/// configuration trained from one seed sees the same batches.
pub fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn batch_hash(epoch: usize, indices: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update((epoch as u64).to_le_bytes());
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Top-1 and top-5 accuracy in eval mode.
pub fn evaluate<T: Float>(net: &mut Network<T>, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch::<T>(chunk);
        let logits = net.forward(&x, Mode::Eval)?;
        top1 += top_k_hits(&logits, &labels, 1);
        top5 += top_k_hits(&logits, &labels, 5);
    }
    let n = data.len() as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}

/// Minibatch SGD with epoch-level cosine decay.
///
/// Batches smaller than two samples are dropped (train-mode batch norm needs two).
pub fn train<T: Float>(
    net: &mut Network<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<History> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Config(
            "training set needs at least two samples".into(),
        ));
    }
    let mut rng = data_rng(cfg.seed);
    let mut opt = Sgd::new(net.params(), cfg.momentum, cfg.weight_decay);
    let lr0 = cfg.effective_lr0();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, lr0)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            history.batch_hashes.push(batch_hash(epoch, chunk));
            let mut pixels = Vec::with_capacity(chunk.len() * IMAGE_LEN);
            for &i in chunk {
                let img = train_set.image(i);
                if opts.augment {
                    pixels.extend(augment(img, &mut rng).into_iter().map(|v| T::of(v as f64)));
                } else {
                    pixels.extend(img.iter().map(|&v| T::of(v as f64)));
                }
            }
            let x = Tensor::new([chunk.len(), 3, IMAGE_SIDE, IMAGE_SIDE], pixels)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            net.params_mut().zero_grads();
            let loss = net.loss_and_grad(&x, &labels)?.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    step,
                    value: loss,
                });
            }
            if step == 0 {
                history.initial_loss = loss;
            }
            history.step_losses.push(loss);
            opt.step(net.params_mut(), lr)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let (test_top1, test_top5) = evaluate(net, test_set)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            test_top1,
            test_top5,
        };
        info!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  top1 {:.4}  top5 {:.4}",
            rec.epoch, rec.lr, rec.train_loss, rec.test_top1, rec.test_top5
        );
        history.epochs.push(rec);
    }
    if let Some(path) = &opts.checkpoint {
        checkpoint::save(net.params(), path)?;
    }
    Ok(history)
}
