//! Member training: bootstrap resampling, block-atomic holdout for early
//! stopping, and minibatch SGD with momentum.
//!
//! One member trains sequentially; different members share no mutable
//! state and use independent seed streams, so any number can train in
//! parallel with bit-reproducible results.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SplitAssignment;
use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};

use super::{augment, dataset_nll, loss_and_grad, BackboneParams, DiversityConfig, TrialSource};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs without holdout improvement before stopping.
    pub patience: usize,
    /// Fraction of training blocks held out for early stopping.
    pub holdout_fraction: f64,
    /// Base seed for member streams; filled from the master seed by the
    /// pipeline when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 200,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            patience: 10,
            holdout_fraction: 0.2,
            seed: None,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs_max < 1 {
            v.push("train.epochs_max must be >= 1".into());
        }
        if self.batch_size < 1 {
            v.push("train.batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            v.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            v.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.patience < 1 {
            v.push("train.patience must be >= 1".into());
        }
        if !(self.holdout_fraction.is_finite()
            && self.holdout_fraction > 0.0
            && self.holdout_fraction <= 0.5)
        {
            v.push(format!(
                "train.holdout_fraction must be in (0, 0.5], got {}",
                self.holdout_fraction
            ));
        }
        v
    }
}

/// Trained parameters plus the early-stopping trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: BackboneParams,
    /// Holdout NLL after each completed epoch.
    pub holdout_nll: Vec<f64>,
    /// Epoch whose parameters were returned (minimal holdout NLL).
    pub best_epoch: usize,
    /// Trial indices used for gradient updates (after bootstrap).
    pub fit_indices: Vec<usize>,
    /// Trial indices used for early stopping.
    pub holdout_indices: Vec<usize>,
}

/// Same-size resample with replacement.
pub fn bootstrap_sample(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..indices.len()).map(|_| indices[rng.random_range(0..indices.len())]).collect()
}

fn distinct_labels<D: TrialSource + ?Sized>(data: &D, indices: &[usize]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for &i in indices {
        seen.insert(data.label(i));
    }
    seen.len()
}

/// Trains one ensemble member on the training partition only.
///
/// A per-class fraction of the training blocks is held out (block-atomic)
/// for early stopping; the remaining trials are bootstrap-resampled when
/// enabled, then optimized with minibatch SGD + momentum. Training stops
/// once the holdout NLL has not improved for `patience` epochs and the
/// parameters from the best epoch are returned. Calibration and test
/// trials are never touched.
pub fn train_member<D: TrialSource + ?Sized>(
    data: &D,
    split: &SplitAssignment,
    train_cfg: &TrainConfig,
    div_cfg: &DiversityConfig,
    member_index: usize,
    member_seed: u64,
) -> Result<TrainOutcome> {
    let mut violations = train_cfg.violations();
    violations.extend(div_cfg.violations());
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(violations));
    }

    // Group training blocks by class for the stratified holdout.
    let mut class_blocks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut block_trials: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..data.num_trials() {
        let b = data.block_id(i);
        if !split.train_blocks.contains(&b) {
            continue;
        }
        block_trials.entry(b).or_default().push(i);
        let blocks = class_blocks.entry(data.label(i)).or_default();
        if !blocks.contains(&b) {
            blocks.push(b);
        }
    }
    if block_trials.is_empty() {
        return Err(Error::InsufficientData("training partition is empty".into()));
    }

    let mut rng_holdout = rng_from(derive(member_seed, "holdout", 0));
    let mut fit_indices = Vec::new();
    let mut holdout_indices = Vec::new();
    for blocks in class_blocks.values() {
        let mut blocks = blocks.clone();
        blocks.sort_unstable();
        blocks.shuffle(&mut rng_holdout);
        let n_hold = if blocks.len() >= 2 {
            ((train_cfg.holdout_fraction * blocks.len() as f64).round() as usize)
                .clamp(1, blocks.len() - 1)
        } else {
            0
        };
        for (pos, &b) in blocks.iter().enumerate() {
            let target = if pos < n_hold { &mut holdout_indices } else { &mut fit_indices };
            target.extend(&block_trials[&b]);
        }
    }
    fit_indices.sort_unstable();
    holdout_indices.sort_unstable();
    if holdout_indices.is_empty() {
        return Err(Error::Training(
            "cannot hold out a block per class for early stopping; give every class \
             at least 2 training blocks"
                .into(),
        ));
    }

    // Bootstrap resample; retry if it collapses onto a single class.
    let mut rng_boot = rng_from(derive(member_seed, "bootstrap", 0));
    let fit_resampled = if div_cfg.bootstrap {
        let mut attempt = 0;
        loop {
            let sample = bootstrap_sample(&fit_indices, &mut rng_boot);
            if distinct_labels(data, &sample) >= 2 {
                break sample;
            }
            attempt += 1;
            if attempt >= 5 {
                return Err(Error::Training(
                    "bootstrap resample collapsed onto one class 5 times".into(),
                ));
            }
        }
    } else {
        if distinct_labels(data, &fit_indices) < 2 {
            return Err(Error::Training("training partition contains only one class".into()));
        }
        fit_indices.clone()
    };

    // Initialize parameters for this member's hyper-variant.
    let (s, w) = div_cfg.variant(member_index);
    let c = data.channels();
    let k = data.num_classes();
    let mut rng_init = rng_from(derive(member_seed, "init", 0));
    let spatial = Array2::from_shape_fn((s, c), |_| {
        rng_init.sample::<f64, _>(StandardNormal) / (c as f64).sqrt()
    });
    let dense = Array2::from_shape_fn((k, s * w), |_| {
        rng_init.sample::<f64, _>(StandardNormal) * 0.1 / ((s * w) as f64).sqrt()
    });
    let bias = Array1::zeros(k);
    let mut params = BackboneParams::new(spatial, dense, bias, w, 1e-6)?;

    let mut velocity = super::Gradients::zeros_like(&params);
    let mut best_params = params.clone();
    let mut best_nll = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_improve = 0;
    let mut history = Vec::new();

    for epoch in 0..train_cfg.epochs_max {
        let mut order = fit_resampled.clone();
        order.shuffle(&mut rng_from(derive(member_seed, "shuffle", epoch as u64)));
        let mut rng_aug = rng_from(derive(member_seed, "augment", epoch as u64));

        for chunk in order.chunks(train_cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let augmented = augment(&data.trial(i), div_cfg, &mut rng_aug);
                batch.push(augmented.mapv(|v| v as f64));
                labels.push(data.label(i));
            }
            let (_, grads) = loss_and_grad(&params, &batch, &labels)?;
            velocity.spatial.zip_mut_with(&grads.spatial, |v, &g| {
                *v = train_cfg.momentum * *v - train_cfg.learning_rate * g;
            });
            velocity.dense.zip_mut_with(&grads.dense, |v, &g| {
                *v = train_cfg.momentum * *v - train_cfg.learning_rate * g;
            });
            velocity.bias.zip_mut_with(&grads.bias, |v, &g| {
                *v = train_cfg.momentum * *v - train_cfg.learning_rate * g;
            });
            params.spatial += &velocity.spatial;
            params.dense += &velocity.dense;
            params.bias += &velocity.bias;
        }

        let holdout = dataset_nll(&params, data, &holdout_indices)?;
        history.push(holdout);
        if holdout < best_nll {
            best_nll = holdout;
            best_params = params.clone();
            best_epoch = epoch;
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= train_cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        holdout_nll: history,
        best_epoch,
        fit_indices: fit_resampled,
        holdout_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TrialSource;
    use crate::data::{block_stratified_split, generate_synthetic, Partition, SynthConfig};
    use crate::prob::softmax;
    use std::collections::BTreeSet;
    use std::sync::Mutex;

    fn quick_cfg() -> TrainConfig {
        TrainConfig { epochs_max: 30, patience: 5, seed: Some(0), ..TrainConfig::default() }
    }

    fn small_set(snr: f64, seed: u64) -> crate::data::TrialSet {
        generate_synthetic(&SynthConfig {
            seed: Some(seed),
            num_classes: 4,
            channels: 4,
            samples: 64,
            blocks_per_class: 10,
            block_size: 4,
            snr,
            sample_rate_hz: 64.0,
        })
        .unwrap()
    }

    fn accuracy(
        params: &BackboneParams,
        ts: &crate::data::TrialSet,
        indices: &[usize],
    ) -> f64 {
        let correct = indices
            .iter()
            .filter(|&&i| {
                let trial = ts.trial(i).mapv(|v| v as f64);
                let logits = crate::backbone::forward(params, &trial.view()).unwrap();
                softmax(&logits).unwrap().argmax() == ts.label(i)
            })
            .count();
        correct as f64 / indices.len() as f64
    }

    #[test]
    fn separable_data_is_learned() {
        let ts = small_set(2.0, 1);
        let split = block_stratified_split(&ts, 7, 1, 2).unwrap();
        let out =
            train_member(&ts, &split, &quick_cfg(), &DiversityConfig::none(), 0, 555).unwrap();
        let train_idx = split.trials(&ts, Partition::Train);
        let acc = accuracy(&out.params, &ts, &train_idx);
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn pure_noise_stays_at_chance() {
        let ts = small_set(0.0, 2);
        let split = block_stratified_split(&ts, 7, 1, 2).unwrap();
        let out =
            train_member(&ts, &split, &quick_cfg(), &DiversityConfig::none(), 0, 556).unwrap();
        let holdout_acc = accuracy(&out.params, &ts, &out.holdout_indices);
        let chance = 1.0 / ts.num_classes() as f64;
        assert!((holdout_acc - chance).abs() <= 0.15, "holdout accuracy {holdout_acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let ts = small_set(0.8, 3);
        let split = block_stratified_split(&ts, 7, 1, 2).unwrap();
        let cfg = quick_cfg();
        let div = DiversityConfig { hyper_variants: vec![(4, 4)], ..DiversityConfig::default() };
        let a = train_member(&ts, &split, &cfg, &div, 0, 777).unwrap();
        let b = train_member(&ts, &split, &cfg, &div, 0, 777).unwrap();
        assert_eq!(a.params.spatial, b.params.spatial);
        assert_eq!(a.params.dense, b.params.dense);
        assert_eq!(a.params.bias, b.params.bias);
        assert_eq!(a.holdout_nll, b.holdout_nll);
    }

    #[test]
    fn returned_params_have_minimal_holdout_nll() {
        let ts = small_set(0.8, 4);
        let split = block_stratified_split(&ts, 7, 1, 2).unwrap();
        let out =
            train_member(&ts, &split, &quick_cfg(), &DiversityConfig::none(), 0, 888).unwrap();
        let min = out.holdout_nll.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.holdout_nll[out.best_epoch], min);
        // The returned parameters really are the ones from that epoch.
        let recomputed = dataset_nll(&out.params, &ts, &out.holdout_indices).unwrap();
        assert!((recomputed - min).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_uses_only_fit_indices_at_same_cardinality() {
        let ts = small_set(0.8, 5);
        let split = block_stratified_split(&ts, 7, 1, 2).ok().unwrap();
        let div = DiversityConfig { bootstrap: true, ..DiversityConfig::none() };
        let out = train_member(&ts, &split, &quick_cfg(), &div, 0, 999).unwrap();
        let train_trials: BTreeSet<usize> =
            split.trials(&ts, Partition::Train).into_iter().collect();
        let holdout: BTreeSet<usize> = out.holdout_indices.iter().copied().collect();
        assert!(out.fit_indices.iter().all(|i| train_trials.contains(i)));
        assert!(out.fit_indices.iter().all(|i| !holdout.contains(i)));
        assert_eq!(out.fit_indices.len() + out.holdout_indices.len(), train_trials.len());
    }

    /// Records every trial index whose data or label is read.
    struct RecordingSource<'a> {
        inner: &'a crate::data::TrialSet,
        touched: Mutex<BTreeSet<usize>>,
    }

    impl TrialSource for RecordingSource<'_> {
        fn num_trials(&self) -> usize {
            self.inner.num_trials()
        }
        fn channels(&self) -> usize {
            self.inner.channels()
        }
        fn samples(&self) -> usize {
            self.inner.samples()
        }
        fn num_classes(&self) -> usize {
            self.inner.num_classes()
        }
        fn trial(&self, index: usize) -> ndarray::ArrayView2<'_, f32> {
            self.touched.lock().unwrap().insert(index);
            self.inner.trial(index)
        }
        fn label(&self, index: usize) -> usize {
            self.touched.lock().unwrap().insert(index);
            self.inner.label(index)
        }
        fn block_id(&self, index: usize) -> usize {
            self.inner.block_id(index)
        }
    }

    #[test]
    fn training_never_reads_cal_or_test_trials() {
        let ts = small_set(0.8, 6);
        let split = block_stratified_split(&ts, 6, 2, 2).unwrap();
        let source = RecordingSource { inner: &ts, touched: Mutex::new(BTreeSet::new()) };
        train_member(&source, &split, &quick_cfg(), &DiversityConfig::default(), 0, 311).unwrap();
        let train_trials: BTreeSet<usize> =
            split.trials(&ts, Partition::Train).into_iter().collect();
        let touched = source.touched.into_inner().unwrap();
        assert!(
            touched.is_subset(&train_trials),
            "read {} indices outside the training partition",
            touched.difference(&train_trials).count()
        );
    }

    #[test]
    fn invalid_config_lists_fields() {
        let ts = small_set(0.8, 7);
        let split = block_stratified_split(&ts, 7, 1, 2).unwrap();
        let bad = TrainConfig { holdout_fraction: 0.9, patience: 0, ..TrainConfig::default() };
        match train_member(&ts, &split, &bad, &DiversityConfig::none(), 0, 1) {
            Err(Error::InvalidConfig(v)) => {
                assert!(v.iter().any(|m| m.contains("holdout_fraction")));
                assert!(v.iter().any(|m| m.contains("patience")));
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }
}
