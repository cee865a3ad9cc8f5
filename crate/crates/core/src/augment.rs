//! Time and frequency masking of feature matrices (no time warping).

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub num_freq_masks: usize,
    /// Maximum frequency-mask width.
    pub freq_param: usize,
    pub num_time_masks: usize,
    /// Maximum time-mask width before the ratio cap.
    pub time_param: usize,
    /// Caps each time mask at `floor(max_time_ratio * frames)`.
    pub max_time_ratio: f64,
    /// Features are normalized per utterance, so 0 is the utterance mean.
    #[serde(default)]
    pub mask_value: f64,
}

impl AugmentConfig {
    /// No masking at all.
    pub fn disabled() -> Self {
        Self {
            num_freq_masks: 0,
            freq_param: 0,
            num_time_masks: 0,
            time_param: 0,
            max_time_ratio: 0.0,
            mask_value: 0.0,
        }
    }

    /// Two frequency masks (F=30) and ten time masks (T=50, ratio 0.1), for
    /// 80-dimensional filterbanks.
    pub fn librispeech() -> Self {
        Self {
            num_freq_masks: 2,
            freq_param: 30,
            num_time_masks: 10,
            time_param: 50,
            max_time_ratio: 0.1,
            mask_value: 0.0,
        }
    }

    /// The low-resource variant: twenty time masks with T=25.
    pub fn librispeech_low_resource() -> Self {
        Self {
            num_time_masks: 20,
            time_param: 25,
            ..Self::librispeech()
        }
    }

    /// Conversational-speech setting: two frequency masks (F=15), two time
    /// masks (T=70, ratio 0.2).
    pub fn switchboard() -> Self {
        Self {
            num_freq_masks: 2,
            freq_param: 15,
            num_time_masks: 2,
            time_param: 70,
            max_time_ratio: 0.2,
            mask_value: 0.0,
        }
    }

    /// Scaled for the synthetic task's short 16-dimensional utterances.
    pub fn synthetic() -> Self {
        Self {
            num_freq_masks: 2,
            freq_param: 3,
            num_time_masks: 2,
            time_param: 4,
            max_time_ratio: 0.1,
            mask_value: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.num_freq_masks == 0 || self.freq_param == 0)
            && (self.num_time_masks == 0 || self.time_param == 0 || self.max_time_ratio == 0.0)
    }

    pub fn validate(&self, feature_dim: usize) -> Result<(), String> {
        if self.freq_param > feature_dim {
            return Err(format!(
                "freq_param {} exceeds feature_dim {feature_dim}",
                self.freq_param
            ));
        }
        if !(0.0..=1.0).contains(&self.max_time_ratio) {
            return Err(format!("max_time_ratio {} is outside [0, 1]", self.max_time_ratio));
        }
        if !self.mask_value.is_finite() {
            return Err("mask_value must be finite".into());
        }
        Ok(())
    }

    /// Widest time mask allowed for an utterance of `frames` frames.
    pub fn max_time_width(&self, frames: usize) -> usize {
        let cap = (self.max_time_ratio * frames as f64).floor() as usize;
        self.time_param.min(cap)
    }
}

/// One contiguous mask: `start..start + width` along its axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    Freq { start: usize, width: usize },
    Time { start: usize, width: usize },
}

/// Draws independent, possibly overlapping masks. Widths are uniform on
/// `0..=max` and offsets uniform over valid positions; frequency masks are
/// drawn before time masks.
pub fn sample_masks(frames: usize, dims: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<Mask> {
    let mut masks = Vec::with_capacity(cfg.num_freq_masks + cfg.num_time_masks);
    let freq_max = cfg.freq_param.min(dims);
    for _ in 0..cfg.num_freq_masks {
        let width = rng.random_range(0..=freq_max);
        let start = rng.random_range(0..=dims - width);
        masks.push(Mask::Freq { start, width });
    }
    let time_max = cfg.max_time_width(frames);
    for _ in 0..cfg.num_time_masks {
        let width = rng.random_range(0..=time_max);
        let start = rng.random_range(0..=frames - width);
        masks.push(Mask::Time { start, width });
    }
    masks
}

pub fn apply_masks(features: ArrayView2<f64>, masks: &[Mask], value: f64) -> Array2<f64> {
    let mut out = features.to_owned();
    for mask in masks {
        match *mask {
            Mask::Freq { start, width } => out.slice_mut(s![.., start..start + width]).fill(value),
            Mask::Time { start, width } => out.slice_mut(s![start..start + width, ..]).fill(value),
        }
    }
    out
}

pub fn spec_augment(features: ArrayView2<f64>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Array2<f64> {
    if cfg.num_freq_masks == 0 && cfg.num_time_masks == 0 {
        return features.to_owned();
    }
    let masks = sample_masks(features.nrows(), features.ncols(), cfg, rng);
    apply_masks(features, &masks, cfg.mask_value)
}
