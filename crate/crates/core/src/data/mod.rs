//! Datasets: CIFAR-10 binary ingestion, a seeded synthetic task,
//! augmentation and seeded mini-batching.

mod augment;
mod cifar;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_sample, Augment};
pub use cifar::{load_cifar10, parse_records, CIFAR_CLASSES, RECORD_BYTES, TEST_FILE, TRAIN_FILES};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use crate::kernel::{Shape4, Tensor};

/// Images (channel-major, flattened) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn empty(channels: usize, side: usize, classes: usize) -> Self {
        Split {
            channels,
            side,
            classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn per_sample(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.per_sample();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn append(&mut self, other: Split) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }

    /// Stack samples `idx` into a batch tensor.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.per_sample());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let shape = Shape4::new(idx.len(), self.channels, self.side, self.side);
        let x = Tensor::from_vec(shape, data).expect("gathered length matches shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let plane = self.side * self.side;
        (0..self.channels)
            .map(|c| {
                let vals = (0..self.len()).flat_map(|i| self.image(i)[c * plane..(c + 1) * plane].iter());
                let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
                for &v in vals {
                    n += 1.0;
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                (mean, var.sqrt().max(1e-8))
            })
            .collect()
    }

    pub fn normalize(&mut self, stats: &[(f64, f64)]) {
        let plane = self.side * self.side;
        for (k, v) in self.images.iter_mut().enumerate() {
            let (m, s) = stats[(k / plane) % self.channels];
            *v = (*v - m) / s;
        }
    }

    /// Shuffled index batches covering every sample once; the last may be short.
    pub fn batch_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        self.len().div_ceil(batch.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Cifar10 {
        path: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub augment: Augment,
}

impl DatasetSpec {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        let cutout = if spec.image_size <= 16 { 4 } else { 16 };
        DatasetSpec {
            source: DataSource::Synthetic(spec),
            augment: Augment {
                cutout,
                ..Augment::default()
            },
        }
    }

    pub fn cifar10(path: PathBuf) -> Self {
        DatasetSpec {
            source: DataSource::Cifar10 {
                path,
                train_limit: None,
                test_limit: None,
            },
            augment: Augment::default(),
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let (mut train, mut test) = match &self.source {
            DataSource::Cifar10 {
                path,
                train_limit,
                test_limit,
            } => load_cifar10(path, *train_limit, *test_limit)?,
            DataSource::Synthetic(s) => s.generate(seed)?,
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::Input("dataset has an empty split".into()));
        }
        if self.augment.normalize {
            let stats = train.channel_stats();
            train.normalize(&stats);
            test.normalize(&stats);
        }
        Ok(Dataset {
            train,
            test,
            augment: self.augment.clone(),
        })
    }
}

/// Loaded, normalized splits. Augmentation applies to training batches only.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub augment: Augment,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.train.classes
    }

    pub fn image_size(&self) -> usize {
        self.train.side
    }

    pub fn channels(&self) -> usize {
        self.train.channels
    }

    /// One epoch of shuffled, augmented training batches.
    pub fn train_epoch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<(Tensor, Vec<usize>)> {
        self.train
            .batch_indices(batch, rng)
            .into_iter()
            .map(|idx| {
                let (mut x, y) = self.train.gather(&idx);
                let per = self.train.per_sample();
                for n in 0..idx.len() {
                    augment_sample(
                        &mut x.data_mut()[n * per..(n + 1) * per],
                        self.train.channels,
                        self.train.side,
                        &self.augment,
                        rng,
                    );
                }
                (x, y)
            })
            .collect()
    }

    /// Test batches in order, unaugmented.
    pub fn test_batches(&self, batch: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let idx: Vec<usize> = (0..self.test.len()).collect();
        idx.chunks(batch.max(1)).map(|c| self.test.gather(c)).collect::<Vec<_>>().into_iter()
    }

    /// `n` random training images (unaugmented).
    pub fn probe<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.train.len())).collect();
        self.train.gather(&idx).0
    }
}
