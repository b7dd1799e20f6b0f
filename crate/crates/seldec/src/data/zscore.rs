//! Per-channel z-scoring with statistics pooled over training trials
//! only; the same parameters are applied to calibration and test.

use std::collections::BTreeSet;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TrialSet;

/// Standard deviations are floored here so constant channels stay finite.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Pools every sample of every trial in the training blocks, per channel.
pub fn fit_channel_stats(ts: &TrialSet, train_blocks: &BTreeSet<usize>) -> Result<ChannelStats> {
    let train_trials = ts.trials_in_blocks(train_blocks);
    if train_trials.is_empty() {
        return Err(Error::InsufficientData(
            "no training trials to fit channel statistics".into(),
        ));
    }
    let c = ts.channels();
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for &i in &train_trials {
        let trial = ts.trial(i);
        for ch in 0..c {
            for &v in trial.row(ch).iter() {
                let v = v as f64;
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
    }
    let count = (train_trials.len() * ts.samples()) as f64;
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    for ch in 0..c {
        mean[ch] = sum[ch] / count;
        let var = (sumsq[ch] / count - mean[ch] * mean[ch]).max(0.0);
        std[ch] = var.sqrt().max(STD_FLOOR);
    }
    Ok(ChannelStats { mean, std })
}

/// `(x - mean[c]) / std[c]` for every sample; labels and blocks unchanged.
pub fn apply_zscore(ts: &TrialSet, stats: &ChannelStats) -> Result<TrialSet> {
    if stats.channels() != ts.channels() || stats.std.len() != ts.channels() {
        return Err(Error::InvalidShape(format!(
            "stats cover {} channels, trial set has {}",
            stats.channels(),
            ts.channels()
        )));
    }
    let mut data = Array3::<f32>::zeros(ts.data().raw_dim());
    for i in 0..ts.num_trials() {
        let trial = ts.trial(i);
        for ch in 0..ts.channels() {
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            for (t, &v) in trial.row(ch).iter().enumerate() {
                data[[i, ch, t]] = ((v as f64 - m) / s) as f32;
            }
        }
    }
    ts.with_data(data)
}
