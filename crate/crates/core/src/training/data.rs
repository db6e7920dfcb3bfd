//! Datasets: the CIFAR-10 binary format and a seeded synthetic task whose
//! class is the grid cell holding a bright square.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::{Scope, ScopedJoinHandle};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIZE * CIFAR_SIZE;

/// Images `[N, C, S, S]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

/// A prepared mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[2] != images.shape()[3] {
            return Err(Error::dim(format!("images must be [N, C, S, S], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the samples at `indices`, in order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            images: Tensor::new(shape, data).expect("batch shape is consistent"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.batch(&idx);
        Dataset { images: b.images, labels: b.labels, num_classes: self.num_classes }
    }

    /// Consecutive batches over `order`; the last may be partial.
    pub fn batches<'a>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Batch> + 'a {
        order.chunks(batch_size.max(1)).map(|c| self.batch(c))
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Prepares batches on a worker thread and hands them over through a
/// bounded queue of `capacity` batches.
pub fn spawn_batches<'scope, 'env>(
    scope: &'scope Scope<'scope, 'env>,
    data: &'env Dataset,
    order: Vec<usize>,
    batch_size: usize,
    capacity: usize,
) -> (Receiver<Batch>, ScopedJoinHandle<'scope, ()>) {
    let (tx, rx) = sync_channel(capacity.max(1));
    let handle = scope.spawn(move || {
        for chunk in order.chunks(batch_size.max(1)) {
            if tx.send(data.batch(chunk)).is_err() {
                break;
            }
        }
    });
    (rx, handle)
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R, G, B planes, each 32×32 row-major). Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8], limit: Option<usize>) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len())));
    }
    let n = (bytes.len() / CIFAR_RECORD).min(limit.unwrap_or(usize::MAX));
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIZE, CIFAR_SIZE], pixels)?, labels, CIFAR_CLASSES)
}

pub fn load_cifar10(files: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?);
    }
    parse_cifar10(&bytes, limit)
}

/// Train and test files of an extracted `cifar-10-batches-bin` directory.
pub fn cifar10_files(dir: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let train = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    (train, vec![dir.join("test_batch.bin")])
}

fn default_noise() -> f64 {
    0.3
}

fn default_channels() -> usize {
    3
}

/// Images whose background is uniform noise in `[0, noise]` and whose class
/// `c` places a bright square inside cell `(c / g, c % g)` of a `g×g` grid,
/// `g = ⌈√classes⌉`. The square's position within the cell varies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let c = cfg.num_classes;
    if c == 0 || cfg.image_size == 0 || cfg.channels == 0 {
        return Err(Error::config("synthetic data needs positive classes, size and channels"));
    }
    let g = (c as f64).sqrt().ceil() as usize;
    let cell = cfg.image_size / g;
    if cell == 0 {
        return Err(Error::config(format!("image_size {} too small for a {g}×{g} class grid", cfg.image_size)));
    }
    let side = (cell / 2).max(1);
    let s = cfg.image_size;
    let per = cfg.channels * s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pixels = Vec::with_capacity(cfg.num_samples * per);
    let mut labels = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let label = i % c;
        let mut img: Vec<f64> = (0..per).map(|_| rng.gen::<f64>() * cfg.noise).collect();
        let (oy, ox) = ((label / g) * cell, (label % g) * cell);
        let dy = rng.gen_range(0..=cell - side);
        let dx = rng.gen_range(0..=cell - side);
        for ch in 0..cfg.channels {
            for y in oy + dy..oy + dy + side {
                for x in ox + dx..ox + dx + side {
                    img[(ch * s + y) * s + x] = 1.0;
                }
            }
        }
        pixels.extend(img);
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![cfg.num_samples, cfg.channels, s, s], pixels)?, labels, c)
}

/// Where an experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// An extracted `cifar-10-batches-bin` directory.
    Cifar10 {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_limit: Option<usize>,
    },
    Synthetic {
        image_size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        num_classes: usize,
        train_samples: usize,
        eval_samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    /// Loads the training and held-out sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Cifar10 { path, train_limit, eval_limit } => {
                if !path.is_dir() {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("CIFAR-10 directory {} not found", path.display()),
                    )));
                }
                let (train, test) = cifar10_files(path);
                Ok((load_cifar10(&train, *train_limit)?, load_cifar10(&test, *eval_limit)?))
            }
            &DatasetSpec::Synthetic { image_size, channels, num_classes, train_samples, eval_samples, noise, seed } => {
                let mk = |num_samples, seed| {
                    synthetic(&SyntheticConfig { num_samples, image_size, channels, num_classes, noise, seed })
                };
                // the held-out set draws from a different stream
                Ok((mk(train_samples, seed)?, mk(eval_samples, seed ^ 0x9e37_79b9_7f4a_7c15)?))
            }
        }
    }

    /// Loads a probe set from a path: a CIFAR-10 binary file, a directory
    /// (its test batch), or a JSON synthetic spec.
    pub fn load_probe(path: &Path, limit: Option<usize>) -> Result<Dataset> {
        if path.is_dir() {
            let (_, test) = cifar10_files(path);
            return load_cifar10(&test, limit);
        }
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: SyntheticConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            let d = synthetic(&cfg)?;
            return Ok(match limit {
                Some(n) => d.head(n),
                None => d,
            });
        }
        load_cifar10(&[path.to_path_buf()], limit)
    }
}
