use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-side augmentation. Runs after normalization, so padding and
/// cutout fill with zero, the per-channel mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    /// Random crop after zero padding by this many pixels; 0 disables.
    pub crop_padding: usize,
    pub flip: bool,
    /// Side of the zeroed square; 0 disables.
    pub cutout: usize,
    pub normalize: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            crop_padding: 4,
            flip: true,
            cutout: 16,
            normalize: true,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Augment {
            crop_padding: 0,
            flip: false,
            cutout: 0,
            normalize: true,
        }
    }
}

/// Augment one `channels x side x side` image in place.
pub fn augment_sample<R: Rng + ?Sized>(img: &mut [f64], channels: usize, side: usize, aug: &Augment, rng: &mut R) {
    let plane = side * side;
    if aug.crop_padding > 0 {
        let p = aug.crop_padding as i64;
        let dy = rng.random_range(-p..=p) as isize;
        let dx = rng.random_range(-p..=p) as isize;
        if dy != 0 || dx != 0 {
            let src = img.to_vec();
            for c in 0..channels {
                for h in 0..side {
                    for w in 0..side {
                        let (sh, sw) = (h as isize + dy, w as isize + dx);
                        let inside = (0..side as isize).contains(&sh) && (0..side as isize).contains(&sw);
                        img[c * plane + h * side + w] = if inside {
                            src[c * plane + sh as usize * side + sw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
    if aug.flip && rng.random_bool(0.5) {
        for c in 0..channels {
            for h in 0..side {
                img[c * plane + h * side..c * plane + (h + 1) * side].reverse();
            }
        }
    }
    if aug.cutout > 0 {
        let cy = rng.random_range(0..side) as isize;
        let cx = rng.random_range(0..side) as isize;
        let half = aug.cutout as isize / 2;
        let rows = (cy - half).max(0) as usize..((cy - half + aug.cutout as isize).min(side as isize)) as usize;
        let cols = (cx - half).max(0) as usize..((cx - half + aug.cutout as isize).min(side as isize)) as usize;
        for c in 0..channels {
            for h in rows.clone() {
                for w in cols.clone() {
                    img[c * plane + h * side + w] = 0.0;
                }
            }
        }
    }
}
