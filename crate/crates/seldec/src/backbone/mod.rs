//! The compact ensemble-member classifier.
//!
//! Forward pipeline per trial (channels x samples):
//! spatial filtering -> squaring -> temporal mean-pooling over equal
//! windows -> log -> dense softmax head. The squared/pooled stage makes
//! the features band-energy-like, so the model is a spatial energy
//! detector with a linear readout. Gradients are exact and hand-derived;
//! see `loss_and_grad`.

mod augment;
mod train;

pub use augment::{augment, circular_shift, DiversityConfig};
pub use train::{bootstrap_sample, train_member, TrainConfig, TrainOutcome};

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::prob::LogitVector;

/// Read-only access to trials for training and prediction.
///
/// Trials are addressed by index so tests can wrap a [`TrialSet`] in an
/// instrumented source and record exactly which indices were touched.
pub trait TrialSource: Sync {
    fn num_trials(&self) -> usize;
    fn channels(&self) -> usize;
    fn samples(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn trial(&self, index: usize) -> ArrayView2<'_, f32>;
    fn label(&self, index: usize) -> usize;
    fn block_id(&self, index: usize) -> usize;
}

impl TrialSource for TrialSet {
    fn num_trials(&self) -> usize {
        TrialSet::num_trials(self)
    }
    fn channels(&self) -> usize {
        TrialSet::channels(self)
    }
    fn samples(&self) -> usize {
        TrialSet::samples(self)
    }
    fn num_classes(&self) -> usize {
        TrialSet::num_classes(self)
    }
    fn trial(&self, index: usize) -> ArrayView2<'_, f32> {
        TrialSet::trial(self, index)
    }
    fn label(&self, index: usize) -> usize {
        TrialSet::label(self, index)
    }
    fn block_id(&self, index: usize) -> usize {
        TrialSet::block_id(self, index)
    }
}

/// All learnable parameters plus the pooling hyper-parameters.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    /// Spatial filters, `[filters][channels]`.
    pub spatial: Array2<f64>,
    /// Dense readout, `[classes][filters * windows]`.
    pub dense: Array2<f64>,
    /// Per-class bias.
    pub bias: Array1<f64>,
    /// Number of equal non-overlapping pooling windows.
    pub windows: usize,
    /// Added before the log so masked (all-zero) stretches stay finite.
    pub eps_log: f64,
}

impl BackboneParams {
    pub fn new(
        spatial: Array2<f64>,
        dense: Array2<f64>,
        bias: Array1<f64>,
        windows: usize,
        eps_log: f64,
    ) -> Result<Self> {
        let filters = spatial.nrows();
        if filters == 0 || windows == 0 {
            return Err(Error::InvalidShape("need at least 1 filter and 1 window".into()));
        }
        if dense.ncols() != filters * windows {
            return Err(Error::InvalidShape(format!(
                "dense expects {} features, pooling produces {}",
                dense.ncols(),
                filters * windows
            )));
        }
        if bias.len() != dense.nrows() {
            return Err(Error::InvalidShape(format!(
                "{} bias entries for {} classes",
                bias.len(),
                dense.nrows()
            )));
        }
        if !(eps_log.is_finite() && eps_log >= 0.0) {
            return Err(Error::InvalidShape(format!("eps_log must be >= 0, got {eps_log}")));
        }
        let finite = spatial.iter().chain(dense.iter()).chain(bias.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(BackboneParams { spatial, dense, bias, windows, eps_log })
    }

    pub fn spatial_filters(&self) -> usize {
        self.spatial.nrows()
    }

    pub fn channels(&self) -> usize {
        self.spatial.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.dense.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.spatial.len() + self.dense.len() + self.bias.len()
    }
}

/// Gradients with the same shapes as the learnable parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub spatial: Array2<f64>,
    pub dense: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradients {
    fn zeros_like(p: &BackboneParams) -> Self {
        Gradients {
            spatial: Array2::zeros(p.spatial.raw_dim()),
            dense: Array2::zeros(p.dense.raw_dim()),
            bias: Array1::zeros(p.bias.raw_dim()),
        }
    }

    fn scale(&mut self, factor: f64) {
        self.spatial.mapv_inplace(|v| v * factor);
        self.dense.mapv_inplace(|v| v * factor);
        self.bias.mapv_inplace(|v| v * factor);
    }

    fn is_finite(&self) -> bool {
        self.spatial
            .iter()
            .chain(self.dense.iter())
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

struct ForwardCache {
    /// Spatially filtered signal, `[filters][samples]`.
    filtered: Array2<f64>,
    /// Pooled squared energy per window, `[filters][windows]`.
    pooled: Array2<f64>,
    /// `ln(pooled + eps)` flattened row-major.
    features: Array1<f64>,
    logits: Array1<f64>,
}

fn forward_cache(params: &BackboneParams, trial: &ArrayView2<'_, f64>) -> Result<ForwardCache> {
    let (c, t) = trial.dim();
    if c != params.channels() {
        return Err(Error::InvalidShape(format!(
            "trial has {c} channels, spatial filter expects {}",
            params.channels()
        )));
    }
    if t < params.windows {
        return Err(Error::InvalidShape(format!(
            "trial has {t} samples, need at least {} for pooling",
            params.windows
        )));
    }
    let s = params.spatial_filters();
    let w = params.windows;
    let window_len = t / w; // trailing samples beyond w*window_len are ignored

    let filtered = params.spatial.dot(trial);
    let mut pooled = Array2::<f64>::zeros((s, w));
    for f in 0..s {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..window_len {
                let v = filtered[[f, j * window_len + k]];
                acc += v * v;
            }
            pooled[[f, j]] = acc / window_len as f64;
        }
    }
    let features =
        Array1::from_iter(pooled.iter().map(|&v| (v + params.eps_log).ln()));
    let logits = params.dense.dot(&features) + &params.bias;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite logits in forward pass".into()));
    }
    Ok(ForwardCache { filtered, pooled, features, logits })
}

/// Class logits for one trial. Deterministic in inputs and parameters.
pub fn forward(params: &BackboneParams, trial: &ArrayView2<'_, f64>) -> Result<LogitVector> {
    let cache = forward_cache(params, trial)?;
    LogitVector::new(cache.logits.to_vec())
}

/// Mean cross-entropy over a batch and its exact analytic gradients.
///
/// Backpropagation through the pipeline: with `p = softmax(logits)` and
/// one-hot label `e`, the logit gradient is `p - e`; it flows through the
/// dense layer, the log (divide by `pooled + eps`), the window mean
/// (divide by window length), the square (multiply by `2 * filtered`),
/// and finally into the spatial filters via the raw trial.
pub fn loss_and_grad(
    params: &BackboneParams,
    batch: &[Array2<f64>],
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if batch.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} trials but {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let k = params.num_classes();
    let mut grads = Gradients::zeros_like(params);
    let mut total_nll = 0.0;

    for (trial, &label) in batch.iter().zip(labels) {
        if label >= k {
            return Err(Error::InvalidShape(format!("label {label} out of range for {k} classes")));
        }
        let cache = forward_cache(params, &trial.view())?;
        let (s, w) = (params.spatial_filters(), params.windows);
        let t = trial.ncols();
        let window_len = t / w;

        let max = cache.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Array1<f64> = cache.logits.mapv(|v| (v - max).exp());
        let z = exp.sum();
        total_nll += max + z.ln() - cache.logits[label];

        // d nll / d logits = softmax - one_hot
        let mut g_logits = exp / z;
        g_logits[label] -= 1.0;

        grads.bias += &g_logits;
        for class in 0..k {
            let g = g_logits[class];
            for i in 0..cache.features.len() {
                grads.dense[[class, i]] += g * cache.features[i];
            }
        }

        // Through dense into the log features, then into the pooled energy.
        let g_features = params.dense.t().dot(&g_logits);
        let mut g_filtered = Array2::<f64>::zeros((s, t));
        for f in 0..s {
            for j in 0..w {
                let g_pool = g_features[f * w + j] / (cache.pooled[[f, j]] + params.eps_log);
                let g_sample = g_pool / window_len as f64;
                for idx in 0..window_len {
                    let col = j * window_len + idx;
                    g_filtered[[f, col]] = 2.0 * cache.filtered[[f, col]] * g_sample;
                }
            }
        }
        grads.spatial += &g_filtered.dot(&trial.t());
    }

    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let nll = total_nll * inv;
    if !nll.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical("non-finite loss or gradient".into()));
    }
    Ok((nll, grads))
}

/// Mean cross-entropy of `params` over the given trial indices, without
/// augmentation. Used for holdout early stopping and diagnostics.
pub fn dataset_nll<D: TrialSource + ?Sized>(
    params: &BackboneParams,
    data: &D,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InsufficientData("no trials to evaluate".into()));
    }
    let mut total = 0.0;
    for &i in indices {
        let trial = data.trial(i).mapv(|v| v as f64);
        let cache = forward_cache(params, &trial.view())?;
        let max = cache.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cache.logits.iter().map(|&v| (v - max).exp()).sum();
        total += max + z.ln() - cache.logits[data.label(i)];
    }
    Ok(total / indices.len() as f64)
}
