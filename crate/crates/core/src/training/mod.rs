//! Desk-scale training: CIFAR-10 ingestion, augmentation, momentum SGD with
//! cosine decay, and top-k evaluation.

mod config;
pub mod data;
mod metrics;
mod schedule;
mod sgd;
#[cfg(test)]
mod tests;
mod trainer;

pub use config::{Normalization, TrainConfig, CIFAR10_NORMALIZATION};
pub use data::{
    augment, augment_with, load_cifar10, write_synthetic_cifar, CifarLimits, Dataset, Split,
};
pub use metrics::{in_top_k, top_k_hits};
pub use schedule::cosine_lr;
pub use sgd::{sgd_step, Sgd};
pub use trainer::{batch_hash, data_rng, evaluate, train, EpochRecord, History, TrainOptions};
