use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Masking policy. Widths are drawn uniformly from `0..=max` and clamp to the input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl SpecAugmentConfig {
    /// Two time masks up to 10% of the frames, two bands up to 20% of the features.
    pub fn default_for(frames: usize, features: usize) -> Self {
        Self {
            time_masks: 2,
            max_time_width: frames / 10,
            freq_masks: 2,
            max_freq_width: features / 5,
        }
    }

    pub fn none() -> Self {
        Self {
            time_masks: 0,
            max_time_width: 0,
            freq_masks: 0,
            max_freq_width: 0,
        }
    }
}

pub fn spec_augment<R: Rng + ?Sized>(x: &Tensor, cfg: &SpecAugmentConfig, rng: &mut R) -> Tensor {
    let (n, f) = (x.rows(), x.cols());
    let mut out = x.clone();
    let data = out.data_mut();
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=cfg.max_time_width.min(n));
        let start = rng.random_range(0..=n - w);
        data[start * f..(start + w) * f].fill(0.0);
    }
    for _ in 0..cfg.freq_masks {
        let w = rng.random_range(0..=cfg.max_freq_width.min(f));
        let start = rng.random_range(0..=f - w);
        for row in data.chunks_mut(f) {
            row[start..start + w].fill(0.0);
        }
    }
    out
}

/// Resamples along time to `round(N / factor)` frames by linear interpolation.
/// Frame centers are aligned, so output frame `i` reads source position
/// `(i + 0.5)·factor − 0.5`, clamped to the input.
pub fn speed_perturb(x: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Input(format!("speed factor must be positive, got {factor}")));
    }
    let (n, f) = (x.rows(), x.cols());
    let out_len = (n as f64 / factor).round() as usize;
    if out_len == 0 {
        return Err(Error::Input(format!("speed factor {factor} leaves no frames of {n}")));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(out_len * f);
    for i in 0..out_len {
        let pos = ((i as f64 + 0.5) * factor - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = pos - lo as f64;
        let (a, b) = (x.row(lo), x.row(hi));
        data.extend(
            a.iter()
                .zip(b)
                .map(|(a, b)| if t == 0.0 { *a } else { a + t * (b - a) }),
        );
    }
    Tensor::new(vec![out_len, f], data)
}
