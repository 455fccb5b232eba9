//! Time and frequency band masking of feature matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    /// Widest time band, in frames.
    pub max_t: usize,
    /// Widest frequency band, in dims.
    pub max_f: usize,
}

impl SpecAugmentConfig {
    pub fn is_identity(&self) -> bool {
        (self.n_time_masks == 0 || self.max_t == 0) && (self.n_freq_masks == 0 || self.max_f == 0)
    }
}

/// Band `[start, start + width)` with `width ~ U{0..=max}` (capped by
/// `len`) and `start ~ U{0..=len − width}`.
fn band(rng: &mut ChaCha8Rng, len: usize, max: usize) -> (usize, usize) {
    let width = rng.random_range(0..=max).min(len);
    let start = rng.random_range(0..=len - width);
    (start, width)
}

/// Zeroes the sampled bands; every other value is copied unchanged.
pub fn spec_augment(feats: &Tensor, cfg: &SpecAugmentConfig, seed: u64) -> Tensor {
    let mut out = feats.clone();
    if cfg.is_identity() || feats.rank() != 2 {
        return out;
    }
    let (t, f) = (feats.rows(), feats.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out.data_mut();
    for _ in 0..cfg.n_time_masks {
        let (s, w) = band(&mut rng, t, cfg.max_t);
        data[s * f..(s + w) * f].fill(0.0);
    }
    for _ in 0..cfg.n_freq_masks {
        let (s, w) = band(&mut rng, f, cfg.max_f);
        for row in 0..t {
            data[row * f + s..row * f + s + w].fill(0.0);
        }
    }
    out
}
