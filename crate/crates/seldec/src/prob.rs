//! Numerically stable probability primitives shared by every stage:
//! softmax, entropy, top-two margin, and ensemble mutual information.
//!
//! All logarithms are natural (nats). `0 * ln 0` is treated as 0 by
//! continuity. Probability vectors are validated at construction and
//! never silently renormalized.

use crate::error::{Error, Result};

/// Simplex tolerance: a probability vector must sum to 1 within this.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A validated discrete distribution over `C >= 2` classes.
///
/// Entries are in `[0, 1]` and sum to 1 within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidShape(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidProbability(format!(
                    "entry {i} is {v}, outside [0, 1]"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, expected 1 within {SIMPLEX_TOL:e}"
            )));
        }
        Ok(ProbVector(values))
    }

    /// Uniform distribution over `c` classes.
    pub fn uniform(c: usize) -> Result<Self> {
        ProbVector::new(vec![1.0 / c as f64; c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires C >= 2
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; the lowest index wins exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Raw (pre-softmax) classifier outputs; every entry must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidShape(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!("entry {i} is {v}")));
        }
        Ok(LogitVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax with max-subtraction so large logits cannot overflow.
///
/// The argmax of the input is preserved in the output.
pub fn softmax(z: &LogitVector) -> Result<ProbVector> {
    let m = z.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.values().iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(sum(exp(z)))` computed with max-subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Shannon entropy in nats: `-sum p ln p`, zero entries contribute 0.
///
/// Range is `[0, ln C]` with equality at one-hot and uniform vectors.
pub fn entropy(p: &ProbVector) -> f64 {
    p.values()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Inverted top-two margin: `1 - (p(1) - p(2))` where `p(1)`, `p(2)` are
/// the two largest entries. 0 for one-hot vectors, 1 at a full tie.
pub fn margin_uncertainty(p: &ProbVector) -> f64 {
    let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p.values() {
        if v > top {
            second = top;
            top = v;
        } else if v > second {
            second = v;
        }
    }
    1.0 - (top - second)
}

/// Arithmetic mean of member distributions, summed in a member-order
/// independent way so permuting the inputs gives bit-identical output.
pub fn mean_prob(members: &[ProbVector]) -> Result<ProbVector> {
    if members.is_empty() {
        return Err(Error::InsufficientData("no member distributions".into()));
    }
    let c = members[0].len();
    for (m, p) in members.iter().enumerate() {
        if p.len() != c {
            return Err(Error::InvalidShape(format!(
                "member {m} has {} classes, expected {c}",
                p.len()
            )));
        }
    }
    let inv_m = 1.0 / members.len() as f64;
    let mut mean = Vec::with_capacity(c);
    let mut column = vec![0.0; members.len()];
    for i in 0..c {
        for (j, p) in members.iter().enumerate() {
            column[j] = p.values()[i];
        }
        mean.push(sorted_sum(&mut column) * inv_m);
    }
    ProbVector::new(mean)
}

/// Ensemble mutual information: `H(mean) - mean(H(member))`.
///
/// Nonnegative up to float rounding (Jensen); small negative values down
/// to about `-1e-12` can appear and are not clamped.
pub fn mutual_information(members: &[ProbVector]) -> Result<f64> {
    let mean = mean_prob(members)?;
    let mut member_entropies: Vec<f64> = members.iter().map(entropy).collect();
    let mean_entropy = sorted_sum(&mut member_entropies) / members.len() as f64;
    Ok(entropy(&mean) - mean_entropy)
}

/// Sum after sorting so the result does not depend on input order.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    values.iter().sum()
}
