use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};

/// Seeded, linearly separable image classification task.
///
/// Each class owns a unit direction in pixel space that is constant within
/// each channel (and, beyond three classes, within each image quadrant), so
/// the signal survives global average pooling. A sample is uniform noise
/// with every class component projected out, plus `separation + a` along its
/// own class direction with `a ~ U[0, separation]`. The class directions
/// therefore classify every sample with margin at least `separation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_size: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            train_samples: 512,
            test_samples: 256,
            image_size: 8,
            separation: 4.0,
        }
    }
}

const CHANNELS: usize = 3;

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let max = if self.image_size >= 2 { 12 } else { 3 };
        if self.classes < 2 || self.classes > max {
            return Err(Error::Config(format!(
                "synthetic task supports 2..={max} classes, got {}",
                self.classes
            )));
        }
        if self.image_size == 0 || self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        Ok(())
    }

    /// Orthonormal class directions in pixel space.
    pub fn directions(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ec);
        let s = self.image_size;
        let quadrants = if self.classes > CHANNELS { 4 } else { 1 };
        let basis = CHANNELS * quadrants;
        let quadrant = |h: usize, w: usize| if quadrants == 1 { 0 } else { 2 * (2 * h / s) + 2 * w / s };
        // Gram-Schmidt in the coarse basis
        let mut coarse: Vec<Vec<f64>> = Vec::new();
        while coarse.len() < self.classes {
            let mut v: Vec<f64> = (0..basis).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in &coarse {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-3 {
                coarse.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        // lift to pixels; each coarse cell covers the same number of pixels
        // only for even sides, so normalize again after lifting
        coarse
            .iter()
            .map(|u| {
                let mut img = Vec::with_capacity(CHANNELS * s * s);
                for c in 0..CHANNELS {
                    for h in 0..s {
                        for w in 0..s {
                            img.push(u[c * quadrants + quadrant(h, w)]);
                        }
                    }
                }
                let n = img.iter().map(|a| a * a).sum::<f64>().sqrt();
                img.into_iter().map(|a| a / n).collect()
            })
            .collect()
    }

    /// Train and test splits, fully determined by `seed`.
    pub fn generate(&self, seed: u64) -> Result<(Split, Split)> {
        self.validate()?;
        let dirs = orthonormalize(self.directions(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |n: usize| {
            let mut split = Split::empty(CHANNELS, self.image_size, self.classes);
            for i in 0..n {
                let label = i % self.classes;
                let mut x: Vec<f64> = (0..dirs[0].len()).map(|_| rng.random_range(0.0..1.0)).collect();
                for d in &dirs {
                    let p: f64 = x.iter().zip(d).map(|(a, b)| a * b).sum();
                    x.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
                }
                let amp = self.separation + rng.random_range(0.0..=self.separation);
                x.iter_mut().zip(&dirs[label]).for_each(|(a, b)| *a += amp * b);
                split.images.extend(x);
                split.labels.push(label);
            }
            split
        };
        let train = make(self.train_samples);
        let test = make(self.test_samples);
        Ok((train, test))
    }
}

/// Lifting can break orthogonality for odd sides; repair it in pixel space.
fn orthonormalize(mut dirs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..dirs.len() {
        let (done, rest) = dirs.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
    }
    dirs
}
