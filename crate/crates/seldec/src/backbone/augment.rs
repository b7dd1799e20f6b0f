//! Diversity-inducing augmentations applied to training trials only:
//! channel dropout, circular time shifts, and contiguous time masking.

use ndarray::{Array2, ArrayView2};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Knobs that decorrelate ensemble members.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityConfig {
    /// Resample the training trials with replacement per member.
    pub bootstrap: bool,
    /// Probability of zeroing each channel independently.
    pub channel_dropout_p: f64,
    /// Circular shift drawn uniformly from `[-max, +max]` samples.
    pub max_time_shift: usize,
    /// Fraction of the window zeroed as one contiguous span.
    pub time_mask_fraction: f64,
    /// (filters, windows) options cycled by member index.
    pub hyper_variants: Vec<(usize, usize)>,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            bootstrap: true,
            channel_dropout_p: 0.1,
            max_time_shift: 8,
            time_mask_fraction: 0.1,
            hyper_variants: vec![(8, 4), (6, 4), (10, 4), (8, 2)],
        }
    }
}

impl DiversityConfig {
    /// No-op configuration; members differ only by initialization.
    pub fn none() -> Self {
        DiversityConfig {
            bootstrap: false,
            channel_dropout_p: 0.0,
            max_time_shift: 0,
            time_mask_fraction: 0.0,
            hyper_variants: vec![(8, 4)],
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.channel_dropout_p.is_finite() && (0.0..1.0).contains(&self.channel_dropout_p)) {
            v.push(format!(
                "diversity.channel_dropout_p must be in [0, 1), got {}",
                self.channel_dropout_p
            ));
        }
        if !(self.time_mask_fraction.is_finite() && (0.0..0.5).contains(&self.time_mask_fraction))
        {
            v.push(format!(
                "diversity.time_mask_fraction must be in [0, 0.5), got {}",
                self.time_mask_fraction
            ));
        }
        if self.hyper_variants.is_empty() {
            v.push("diversity.hyper_variants must not be empty".into());
        }
        for &(s, w) in &self.hyper_variants {
            if s == 0 || w == 0 {
                v.push(format!("diversity.hyper_variants entry ({s}, {w}) must be >= (1, 1)"));
            }
        }
        v
    }

    /// Variant for member `m`, cycling through the configured options.
    pub fn variant(&self, member_index: usize) -> (usize, usize) {
        self.hyper_variants[member_index % self.hyper_variants.len()]
    }
}

/// Circular shift along the sample axis: positive shifts move content
/// toward later samples; no energy is lost.
pub fn circular_shift(trial: &ArrayView2<'_, f32>, shift: i64) -> Array2<f32> {
    let (c, t) = trial.dim();
    let t_i = t as i64;
    Array2::from_shape_fn((c, t), |(ch, s)| {
        let src = (s as i64 - shift).rem_euclid(t_i) as usize;
        trial[[ch, src]]
    })
}

/// Applies channel dropout, a circular time shift, and a contiguous time
/// mask, in that order. The label never changes. An all-zero
/// configuration returns the trial unchanged.
pub fn augment(
    trial: &ArrayView2<'_, f32>,
    cfg: &DiversityConfig,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let (c, t) = trial.dim();
    let mut out = trial.to_owned();

    for ch in 0..c {
        if rng.random::<f64>() < cfg.channel_dropout_p {
            out.row_mut(ch).fill(0.0);
        }
    }

    let max_shift = cfg.max_time_shift.min(t) as i64;
    let shift = rng.random_range(-max_shift..=max_shift);
    if shift != 0 {
        out = circular_shift(&out.view(), shift);
    }

    let mask_len = (cfg.time_mask_fraction * t as f64).floor() as usize;
    if mask_len > 0 {
        let start = rng.random_range(0..=t - mask_len);
        for ch in 0..c {
            for s in start..start + mask_len {
                out[[ch, s]] = 0.0;
            }
        }
    }
    out
}
