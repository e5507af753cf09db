use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SupernetModel;
use crate::kernel::{Mode, Shape4, Tape, Tensor, Var};

/// Samples evaluated per forward pass.
const CHUNK: usize = 64;

/// Per-sample bit vectors of `input > 0` over every counted ReLU on `tape`.
pub fn activation_patterns(tape: &Tape) -> Vec<Vec<u64>> {
    let marks: Vec<_> = tape.relu_marks().iter().filter(|m| m.counted).collect();
    let Some(first) = marks.first() else {
        return Vec::new();
    };
    let n = tape.shape(first.input).n;
    let mut patterns = vec![Vec::new(); n];
    for (s, bits) in patterns.iter_mut().enumerate() {
        let mut word = 0u64;
        let mut used = 0;
        for m in &marks {
            for &v in tape.value(m.input).sample(s) {
                if v > 0.0 {
                    word |= 1 << used;
                }
                used += 1;
                if used == 64 {
                    bits.push(word);
                    word = 0;
                    used = 0;
                }
            }
        }
        if used > 0 {
            bits.push(word);
        }
    }
    patterns
}

/// Distinct activation patterns among `samples` inputs drawn uniformly
/// from `[0, 1]`: a sampled lower bound on the number of linear regions.
/// Evaluation mode keeps every sample's pattern independent of its batch.
pub fn count_linear_regions<R: Rng + ?Sized>(model: &SupernetModel, samples: usize, rng: &mut R) -> Result<usize> {
    let cfg = model.config();
    count_regions_with(cfg.in_channels, cfg.image_size, samples, rng, |tape, x| {
        model.forward(tape, x, Mode::Eval, None).map(|_| ())
    })
}

/// Region count of any network recorded by `forward` on a tape, over
/// `samples` uniform inputs of shape `(channels, side, side)`.
pub fn count_regions_with<R, F>(channels: usize, side: usize, samples: usize, rng: &mut R, mut forward: F) -> Result<usize>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape, Var) -> Result<()>,
{
    if samples == 0 {
        return Err(Error::Input("linear region count needs at least one sample".into()));
    }
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut left = samples;
    while left > 0 {
        let n = left.min(CHUNK);
        left -= n;
        let shape = Shape4::new(n, channels, side, side);
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.0..=1.0)).collect())?;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        forward(&mut tape, xv)?;
        let patterns = activation_patterns(&tape);
        if patterns.is_empty() {
            // no ReLU units: a single affine region
            return Ok(1);
        }
        seen.extend(patterns);
    }
    Ok(seen.len())
}
