//! Post-hoc temperature scaling, fitted per member on the calibration
//! split by minimizing mean cross-entropy.
//!
//! The objective is unimodal in the temperature for fixed logits, so a
//! golden-section search on `ln T` over a bounded domain finds the
//! minimizer without derivatives. Temperatures are confined to
//! `[T_MIN, T_MAX]`; on degenerate calibration sets (all correct with
//! positive margin) the objective decreases monotonically toward 0 and
//! the fit lands on the lower bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{log_sum_exp, softmax, LogitVector, ProbVector};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;

/// Absolute tolerance of the search, in `ln T`.
const LOG_T_TOL: f64 = 1e-4;

/// A fitted softmax temperature, confined to `[T_MIN, T_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && (T_MIN..=T_MAX).contains(&value)) {
            return Err(Error::InvalidConfig(vec![format!(
                "temperature must be in [{T_MIN}, {T_MAX}], got {value}"
            )]));
        }
        Ok(Temperature(value))
    }

    pub fn identity() -> Self {
        Temperature(1.0)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Mean cross-entropy of `softmax(z / t)` at the true labels.
pub fn nll_at_temperature(logits: &[LogitVector], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let scaled: Vec<f64> = z.values().iter().map(|&v| v / t).collect();
        total += log_sum_exp(&scaled) - scaled[y];
    }
    total / logits.len() as f64
}

/// Fits the temperature minimizing calibration cross-entropy.
///
/// Golden-section search on `ln T` to an absolute tolerance of `1e-4`;
/// the result never has higher NLL than the uncalibrated `T = 1`.
pub fn fit_temperature(logits: &[LogitVector], labels: &[usize]) -> Result<Temperature> {
    if logits.is_empty() {
        return Err(Error::InsufficientData("empty calibration set".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} logit vectors but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(Error::InvalidShape(format!(
                "label {y} out of range for {} classes",
                z.len()
            )));
        }
    }

    let objective = |x: f64| nll_at_temperature(logits, labels, x.exp());

    // Golden-section bracket on x = ln T.
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (T_MIN.ln(), T_MAX.ln());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while hi - lo > LOG_T_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    let mut t = (0.5 * (lo + hi)).exp().clamp(T_MIN, T_MAX);
    if nll_at_temperature(logits, labels, t) > nll_at_temperature(logits, labels, 1.0) {
        t = 1.0;
    }
    Temperature::new(t)
}

/// `softmax(z / T)`; a monotone transform, so the argmax never changes.
pub fn apply_temperature(z: &LogitVector, t: Temperature) -> Result<ProbVector> {
    let scaled = LogitVector::new(z.values().iter().map(|&v| v / t.value()).collect())?;
    softmax(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    /// 2000-point grid search over [T_MIN, T_MAX]; the reference the fit
    /// must match.
    fn grid_argmin(logits: &[LogitVector], labels: &[usize]) -> f64 {
        let mut best_t = T_MIN;
        let mut best = f64::INFINITY;
        for j in 0..2000 {
            let t = T_MIN + j as f64 * (T_MAX - T_MIN) / 1999.0;
            let nll = nll_at_temperature(logits, labels, t);
            if nll < best {
                best = nll;
                best_t = t;
            }
        }
        best_t
    }

    /// Draws labels from random distributions and emits `scale * ln p` as
    /// logits, so the optimal temperature is close to `scale`.
    fn synthetic_calibration(
        seed: u64,
        n: usize,
        k: usize,
        scale: f64,
    ) -> (Vec<LogitVector>, Vec<usize>) {
        let mut rng = crate::rng::rng_from(seed);
        let mut logits = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = k - 1;
            for (c, &pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    y = c;
                    break;
                }
            }
            logits.push(LogitVector::new(p.iter().map(|v| scale * v.ln()).collect()).unwrap());
            labels.push(y);
        }
        (logits, labels)
    }

    fn assert_matches_grid(logits: &[LogitVector], labels: &[usize]) -> f64 {
        let t = fit_temperature(logits, labels).unwrap().value();
        let t_grid = grid_argmin(logits, labels);
        let d_nll = (nll_at_temperature(logits, labels, t)
            - nll_at_temperature(logits, labels, t_grid))
        .abs();
        assert!(
            (t - t_grid).abs() <= 0.02 || d_nll <= 1e-6,
            "fit {t} vs grid {t_grid}, dNLL {d_nll:e}"
        );
        t
    }

    #[test]
    fn well_calibrated_logits_fit_near_one() {
        let (logits, labels) = synthetic_calibration(1, 2000, 6, 1.0);
        let t = assert_matches_grid(&logits, &labels);
        assert_abs_diff_eq!(t, 1.0, epsilon = 0.05);
    }

    #[test]
    fn overconfident_logits_fit_near_ten() {
        let (logits, labels) = synthetic_calibration(2, 2000, 6, 10.0);
        let t = assert_matches_grid(&logits, &labels);
        assert_abs_diff_eq!(t, 10.0, epsilon = 0.5);
    }

    #[test]
    fn single_confident_sample_clamps_to_lower_bound() {
        let logits = vec![LogitVector::new(vec![2.0, 0.0, -1.0]).unwrap()];
        let labels = vec![0usize];
        // The grid confirms the objective is monotone: minimum at T_MIN.
        assert_eq!(grid_argmin(&logits, &labels), T_MIN);
        let t = fit_temperature(&logits, &labels).unwrap().value();
        assert!((t - T_MIN).abs() <= 1e-3, "got {t}");
    }

    #[test]
    fn fitted_nll_never_exceeds_identity() {
        for seed in 0..20 {
            let scale = 0.3 + 0.7 * seed as f64;
            let (logits, labels) = synthetic_calibration(100 + seed as u64, 64, 5, scale);
            let t = fit_temperature(&logits, &labels).unwrap().value();
            let fitted = nll_at_temperature(&logits, &labels, t);
            let identity = nll_at_temperature(&logits, &labels, 1.0);
            assert!(fitted <= identity + 1e-9, "seed {seed}: {fitted} > {identity}");
            assert_matches_grid(&logits, &labels);
        }
    }

    #[test]
    fn identity_temperature_is_plain_softmax() {
        let z = LogitVector::new(vec![0.4, -1.2, 2.0]).unwrap();
        let a = apply_temperature(&z, Temperature::identity()).unwrap();
        let b = softmax(&z).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn high_temperature_flattens() {
        let z = LogitVector::new(vec![2.0, 0.0]).unwrap();
        let p = apply_temperature(&z, Temperature::new(20.0).unwrap()).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.525, epsilon = 0.01);
        assert_abs_diff_eq!(p.values()[1], 0.475, epsilon = 0.01);
    }

    #[test]
    fn argmax_is_invariant_under_temperature() {
        let mut rng = crate::rng::rng_from(3);
        for _ in 0..200 {
            let z = LogitVector::new((0..7).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect())
                .unwrap();
            for t in [T_MIN, 0.3, 1.0, 4.0, T_MAX] {
                let p = apply_temperature(&z, Temperature::new(t).unwrap()).unwrap();
                assert_eq!(p.argmax(), z.argmax());
            }
        }
    }

    #[test]
    fn empty_calibration_set_is_rejected() {
        assert!(matches!(fit_temperature(&[], &[]), Err(Error::InsufficientData(_))));
    }
}
