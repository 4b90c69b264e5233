//! CIFAR-10 binary batches, augmentation, and a class-structured synthetic
//! generator that writes the same format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Normalization;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{Float, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_LEN: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_LEN: usize = 1 + IMAGE_LEN;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalized `N×3×32×32` images with labels in `[0, num_classes)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_LEN {
            return Err(Error::dim(
                "dataset",
                format!("{} labels but {} pixel values", labels.len(), images.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * IMAGE_LEN].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Stacks the given samples into a `B×3×32×32` tensor.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        let x = Tensor::new([indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn format_error(path: &Path, detail: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail,
    }
}

/// Checks a batch file's size without reading it.
fn check_batch_size(path: &Path) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let expected = (RECORDS_PER_FILE * RECORD_LEN) as u64;
    if meta.len() != expected {
        return Err(format_error(
            path,
            format!(
                "expected {expected} bytes ({RECORDS_PER_FILE} records of {RECORD_LEN}), found {}",
                meta.len()
            ),
        ));
    }
    Ok(())
}

/// Reads up to `limit` records of one binary batch file.
pub fn read_batch(
    path: &Path,
    limit: usize,
    norm: &Normalization,
) -> Result<(Vec<f32>, Vec<usize>)> {
    check_batch_size(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = limit.min(RECORDS_PER_FILE);
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD_LEN).take(n) {
        let label = rec[0] as usize;
        if label >= NUM_CLASSES {
            return Err(format_error(
                path,
                format!("label byte {label} outside 0..{NUM_CLASSES}"),
            ));
        }
        labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(IMAGE_SIDE * IMAGE_SIDE).enumerate() {
            let (m, s) = (norm.mean[c], norm.std[c]);
            images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - m) / s));
        }
    }
    Ok((images, labels))
}

/// Loading limits for [`load_cifar10`]; `None` keeps everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct CifarLimits {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

/// Loads the five training batches and the test batch from `dir`.
///
/// Every file must be a full 10000-record batch; only the first
/// `limits.train` / `limits.test` records are decoded.
pub fn load_cifar10(
    dir: &Path,
    limits: CifarLimits,
    norm: &Normalization,
) -> Result<(Dataset, Dataset)> {
    let train_paths: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let test_path = dir.join(TEST_FILE);
    for p in train_paths.iter().chain(std::iter::once(&test_path)) {
        check_batch_size(p)?;
    }
    let want = limits.train.unwrap_or(usize::MAX);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in &train_paths {
        if labels.len() >= want {
            break;
        }
        let (im, lb) = read_batch(p, want - labels.len(), norm)?;
        images.extend(im);
        labels.extend(lb);
    }
    let train = Dataset::new(images, labels, NUM_CLASSES, Split::Train)?;
    let (im, lb) = read_batch(&test_path, limits.test.unwrap_or(usize::MAX), norm)?;
    let test = Dataset::new(im, lb, NUM_CLASSES, Split::Test)?;
    Ok((train, test))
}

/// Pads by 4 with zeros, crops 32×32 at `(dy, dx)` in `0..=8`, optionally mirrors.
pub fn augment_with(image: &[f32], dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    const PAD: usize = 4;
    let side = IMAGE_SIDE;
    let mut out = vec![0.0; IMAGE_LEN];
    for c in 0..3 {
        let src = &image[c * side * side..(c + 1) * side * side];
        let dst = &mut out[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            // row y of the crop is row y+dy of the padded image
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = (x + dx) as isize - PAD as isize;
                if sx < 0 || sx >= side as isize {
                    continue;
                }
                let tx = if flip { side - 1 - x } else { x };
                dst[y * side + tx] = src[sy as usize * side + sx as usize];
            }
        }
    }
    out
}

/// Random crop from the 40×40 zero-padded image plus a coin-flip mirror.
pub fn augment(image: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    let dy = rng.gen_range(0..=8);
    let dx = rng.gen_range(0..=8);
    let flip = rng.gen_bool(0.5);
    augment_with(image, dy, dx, flip)
}

/// Writes a CIFAR-10-format directory of class-structured synthetic images.
///
/// Each class owns a colour bias and an oriented sinusoidal texture; samples
/// add a random phase shift and pixel noise. `records` records go into each
/// of the six files (the loader requires 10000).
pub fn write_synthetic_cifar(dir: &Path, records: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = IMAGE_SIDE as f64;
    let classes: Vec<([f64; 3], f64, f64, f64)> = (0..NUM_CLASSES)
        .map(|k| {
            let color = [
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            ];
            let angle = std::f64::consts::PI * k as f64 / NUM_CLASSES as f64;
            let freq = 2.0 + (k % 3) as f64;
            (color, angle, freq, rng.gen_range(30.0..60.0))
        })
        .collect();
    let files: Vec<&str> = TRAIN_FILES
        .iter()
        .copied()
        .chain(std::iter::once(TEST_FILE))
        .collect();
    for name in files {
        let mut bytes = Vec::with_capacity(records * RECORD_LEN);
        for _ in 0..records {
            let label = rng.gen_range(0..NUM_CLASSES);
            let (color, angle, freq, amp) = classes[label];
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            bytes.push(label as u8);
            for &bias in &color {
                for y in 0..IMAGE_SIDE {
                    for x in 0..IMAGE_SIDE {
                        let u = (x as f64 * ca + y as f64 * sa) / side;
                        let v = 128.0
                            + bias
                            + amp * (std::f64::consts::TAU * freq * u + phase).sin()
                            + rng.gen_range(-40.0..40.0);
                        bytes.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}
