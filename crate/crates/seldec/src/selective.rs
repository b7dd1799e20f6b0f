//! Coverage-targeted abstention.
//!
//! Thresholds are fitted on calibration-set uncertainty scores: for each
//! target coverage `alpha` the threshold is the smallest observed score
//! whose empirical calibration coverage reaches `alpha` (the
//! `ceil(alpha * n)`-th order statistic). At test time a trial is
//! accepted when its score is at or below the threshold (inclusive).
//!
//! Accuracy over an empty accepted set is defined as 1.0 (risk 0): a
//! policy that abstains on everything commits no errors. This convention
//! is arbitrary but applied consistently everywhere, including AURC.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsemblePrediction;
use crate::error::{Error, Result};

/// Which uncertainty score drives acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Entropy of the ensemble mean (the default).
    Entropy,
    /// Inverted top-two margin of the mean.
    Margin,
    /// Ensemble mutual information.
    MutualInfo,
}

impl ScoreKind {
    pub fn score(&self, pred: &EnsemblePrediction) -> f64 {
        match self {
            ScoreKind::Entropy => pred.entropy,
            ScoreKind::Margin => pred.margin_u,
            ScoreKind::MutualInfo => pred.mutual_info,
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(ScoreKind::Entropy),
            "margin" => Ok(ScoreKind::Margin),
            "mi" | "mutual_info" => Ok(ScoreKind::MutualInfo),
            other => Err(Error::InvalidConfig(vec![format!(
                "unknown score kind `{other}`; expected entropy, margin, or mi"
            )])),
        }
    }
}

/// The default coverage grid `{0.05, 0.10, ..., 1.00}`.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

/// Per-coverage-level thresholds over a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivePolicy {
    pub score_kind: ScoreKind,
    /// `(alpha, threshold)` pairs sorted by ascending alpha.
    pub thresholds: Vec<(f64, f64)>,
}

/// Accept/abstain outcome for one trial at one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Accept(usize),
    Abstain,
}

const ALPHA_EPS: f64 = 1e-9;

/// A coverage grid must be strictly increasing with entries in `(0, 1]`.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig(vec!["coverage grid is empty".into()]));
    }
    for (i, &a) in grid.iter().enumerate() {
        if !(a.is_finite() && a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidConfig(vec![format!(
                "coverage grid entry {i} is {a}, must be in (0, 1]"
            )]));
        }
        if i > 0 && a <= grid[i - 1] {
            return Err(Error::InvalidConfig(vec![format!(
                "coverage grid must be strictly increasing; entry {i} ({a}) <= {}",
                grid[i - 1]
            )]));
        }
    }
    Ok(())
}

/// Fits per-alpha thresholds on calibration scores.
///
/// The threshold for `alpha` is the `ceil(alpha * n)`-th smallest score,
/// so calibration coverage of `{u <= threshold}` is at least `alpha` and
/// no smaller observed score achieves that. With duplicated scores the
/// achieved coverage may exceed `alpha`.
pub fn fit_thresholds(
    score_kind: ScoreKind,
    cal_scores: &[f64],
    grid: &[f64],
) -> Result<SelectivePolicy> {
    if cal_scores.is_empty() {
        return Err(Error::InsufficientData("no calibration scores".into()));
    }
    if let Some(&bad) = cal_scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite calibration score {bad}")));
    }
    validate_grid(grid)?;

    let mut sorted = cal_scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    let thresholds = grid
        .iter()
        .map(|&alpha| {
            // Smallest rank whose empirical coverage rank/n reaches alpha;
            // this is ceil(alpha * n) evaluated with the same floating
            // comparison the coverage check itself uses.
            let rank = (1..=n)
                .find(|&r| r as f64 / n as f64 >= alpha)
                .unwrap_or(n);
            (alpha, sorted[rank - 1])
        })
        .collect();
    Ok(SelectivePolicy { score_kind, thresholds })
}

impl SelectivePolicy {
    pub fn alphas(&self) -> Vec<f64> {
        self.thresholds.iter().map(|&(a, _)| a).collect()
    }

    /// Threshold for `alpha`, or `UnknownOperatingPoint` if off-grid.
    pub fn threshold(&self, alpha: f64) -> Result<f64> {
        self.thresholds
            .iter()
            .find(|&&(a, _)| (a - alpha).abs() <= ALPHA_EPS)
            .map(|&(_, tau)| tau)
            .ok_or(Error::UnknownOperatingPoint(alpha))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

/// Accept iff the prediction's score is at or below the threshold.
pub fn decide(pred: &EnsemblePrediction, policy: &SelectivePolicy, alpha: f64) -> Result<Decision> {
    let tau = policy.threshold(alpha)?;
    if policy.score_kind.score(pred) <= tau {
        Ok(Decision::Accept(pred.predicted_class))
    } else {
        Ok(Decision::Abstain)
    }
}

/// One evaluated operating point of a coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub achieved_coverage: f64,
    pub accuracy: f64,
    pub risk: f64,
    pub n_accepted: usize,
}

/// Accuracy/risk vs. coverage over the policy grid, sorted by alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub points: Vec<CurvePoint>,
}

/// Evaluates accept/abstain outcomes at every grid alpha.
pub fn coverage_curve(
    preds: &[EnsemblePrediction],
    labels: &[usize],
    policy: &SelectivePolicy,
    grid: &[f64],
) -> Result<CoverageCurve> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n = preds.len();
    let mut points = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let tau = policy.threshold(alpha)?;
        let mut n_accepted = 0usize;
        let mut n_correct = 0usize;
        for (pred, &label) in preds.iter().zip(labels) {
            if policy.score_kind.score(pred) <= tau {
                n_accepted += 1;
                if pred.predicted_class == label {
                    n_correct += 1;
                }
            }
        }
        let accuracy = if n_accepted == 0 { 1.0 } else { n_correct as f64 / n_accepted as f64 };
        points.push(CurvePoint {
            alpha,
            achieved_coverage: if n == 0 { 0.0 } else { n_accepted as f64 / n as f64 },
            accuracy,
            risk: 1.0 - accuracy,
            n_accepted,
        });
    }
    Ok(CoverageCurve { points })
}

impl CoverageCurve {
    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidCurve("no points".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if i > 0 && p.alpha <= self.points[i - 1].alpha {
                return Err(Error::InvalidCurve(format!(
                    "alphas must be strictly increasing; point {i} has alpha {} after {}",
                    p.alpha,
                    self.points[i - 1].alpha
                )));
            }
        }
        Ok(())
    }

    /// Risk at the grid point `alpha`, or `UnknownOperatingPoint`.
    pub fn risk_at_coverage(&self, alpha: f64) -> Result<f64> {
        self.points
            .iter()
            .find(|p| (p.alpha - alpha).abs() <= ALPHA_EPS)
            .map(|p| p.risk)
            .ok_or(Error::UnknownOperatingPoint(alpha))
    }

    /// Largest achieved coverage among grid points with risk at most
    /// `target_risk`; 0 when no point qualifies.
    pub fn coverage_at_risk(&self, target_risk: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.risk <= target_risk)
            .map(|p| p.achieved_coverage)
            .fold(0.0, f64::max)
    }

    /// `alpha,achieved_coverage,accuracy,risk,n_accepted` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "alpha,achieved_coverage,accuracy,risk,n_accepted")?;
        for p in &self.points {
            writeln!(
                f,
                "{},{},{},{},{}",
                p.alpha, p.achieved_coverage, p.accuracy, p.risk, p.n_accepted
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Trapezoidal area under the risk-coverage curve over target alphas.
///
/// The left boundary is extended with constant risk `r(alpha_min)` so the
/// integral starts at coverage 0; it ends at the largest grid alpha
/// (1.0 on the default grid).
pub fn aurc(curve: &CoverageCurve) -> Result<f64> {
    curve.validate()?;
    let first = &curve.points[0];
    let mut area = first.alpha * first.risk; // constant extrapolation on [0, alpha_min]
    for pair in curve.points.windows(2) {
        area += (pair[1].alpha - pair[0].alpha) * 0.5 * (pair[0].risk + pair[1].risk);
    }
    Ok(area)
}

/// Risk at requested coverages and coverage at requested risk targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingPoints {
    pub risk_at_coverage: Vec<RiskAtCoverage>,
    pub coverage_at_risk: Vec<CoverageAtRisk>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskAtCoverage {
    pub alpha: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageAtRisk {
    pub target_risk: f64,
    pub coverage: f64,
}

pub fn operating_points(
    curve: &CoverageCurve,
    coverage_alphas: &[f64],
    target_risks: &[f64],
) -> Result<OperatingPoints> {
    curve.validate()?;
    let risk_at_coverage = coverage_alphas
        .iter()
        .map(|&alpha| Ok(RiskAtCoverage { alpha, risk: curve.risk_at_coverage(alpha)? }))
        .collect::<Result<Vec<_>>>()?;
    let coverage_at_risk = target_risks
        .iter()
        .map(|&target_risk| CoverageAtRisk {
            target_risk,
            coverage: curve.coverage_at_risk(target_risk),
        })
        .collect();
    Ok(OperatingPoints { risk_at_coverage, coverage_at_risk })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::aggregate;
    use crate::prob::ProbVector;
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    fn pred_with_entropy(p: &[f64]) -> EnsemblePrediction {
        aggregate(vec![ProbVector::new(p.to_vec()).unwrap()]).unwrap()
    }

    #[test]
    fn order_statistic_thresholds() {
        let policy =
            fit_thresholds(ScoreKind::Entropy, &[0.1, 0.2, 0.3, 0.4], &[0.5, 1.0]).unwrap();
        assert_eq!(policy.threshold(0.5).unwrap(), 0.2);
        assert_eq!(policy.threshold(1.0).unwrap(), 0.4);
    }

    #[test]
    fn tied_scores_saturate_coverage() {
        let scores = [0.7; 6];
        let policy = fit_thresholds(ScoreKind::Entropy, &scores, &default_grid()).unwrap();
        for &(_, tau) in &policy.thresholds {
            assert_eq!(tau, 0.7);
        }
        let accepted = scores.iter().filter(|&&s| s <= 0.7).count();
        assert_eq!(accepted, 6);
    }

    #[test]
    fn thresholds_are_minimal_by_brute_force() {
        // Oracle: scan every candidate threshold (the observed scores) and
        // take the smallest one meeting the coverage constraint.
        let mut rng = crate::rng::rng_from(13);
        for case in 0..40 {
            let n = rng.random_range(1..60);
            let mut scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            // Inject ties.
            if n > 3 {
                scores[1] = scores[0];
                scores[2] = scores[0];
            }
            let grid = default_grid();
            let policy = fit_thresholds(ScoreKind::Entropy, &scores, &grid).unwrap();
            for &alpha in &grid {
                let tau = policy.threshold(alpha).unwrap();
                let mut candidates = scores.clone();
                candidates.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
                let coverage = |thr: f64| {
                    scores.iter().filter(|&&s| s <= thr).count() as f64 / n as f64
                };
                let oracle = candidates
                    .iter()
                    .copied()
                    .find(|&thr| coverage(thr) >= alpha)
                    .expect("alpha <= 1 always satisfiable");
                assert_eq!(tau, oracle, "case {case}, alpha {alpha}");
            }
        }
    }

    #[test]
    fn thresholds_nondecreasing_and_accepted_sets_nested() {
        let mut rng = crate::rng::rng_from(14);
        let scores: Vec<f64> = (0..37).map(|_| rng.random::<f64>()).collect();
        let grid = default_grid();
        let policy = fit_thresholds(ScoreKind::Entropy, &scores, &grid).unwrap();
        let eval: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let mut previous_tau = f64::NEG_INFINITY;
        let mut previous_set: Vec<usize> = Vec::new();
        for &alpha in &grid {
            let tau = policy.threshold(alpha).unwrap();
            assert!(tau >= previous_tau);
            previous_tau = tau;
            let accepted: Vec<usize> =
                eval.iter().enumerate().filter(|(_, &s)| s <= tau).map(|(i, _)| i).collect();
            assert!(previous_set.iter().all(|i| accepted.contains(i)));
            previous_set = accepted;
        }
    }

    #[test]
    fn decide_is_inclusive_at_the_threshold() {
        let uniform = pred_with_entropy(&[0.5, 0.5]); // entropy = ln 2
        let ln2 = (2.0f64).ln();
        let policy =
            SelectivePolicy { score_kind: ScoreKind::Entropy, thresholds: vec![(0.5, ln2)] };
        assert_eq!(decide(&uniform, &policy, 0.5).unwrap(), Decision::Accept(0));
        let below = SelectivePolicy {
            score_kind: ScoreKind::Entropy,
            thresholds: vec![(0.5, ln2 - 1e-9)],
        };
        assert_eq!(decide(&uniform, &below, 0.5).unwrap(), Decision::Abstain);
    }

    #[test]
    fn off_grid_alpha_is_an_error() {
        let policy =
            SelectivePolicy { score_kind: ScoreKind::Entropy, thresholds: vec![(0.5, 1.0)] };
        let pred = pred_with_entropy(&[0.9, 0.1]);
        assert!(matches!(
            decide(&pred, &policy, 0.25),
            Err(Error::UnknownOperatingPoint(_))
        ));
    }

    #[test]
    fn calibration_coverage_meets_every_alpha() {
        let mut rng = crate::rng::rng_from(15);
        let scores: Vec<f64> = (0..41).map(|_| rng.random::<f64>()).collect();
        let grid = default_grid();
        let policy = fit_thresholds(ScoreKind::Entropy, &scores, &grid).unwrap();
        for &alpha in &grid {
            let tau = policy.threshold(alpha).unwrap();
            let covered = scores.iter().filter(|&&s| s <= tau).count() as f64 / 41.0;
            assert!(covered >= alpha, "alpha {alpha}: coverage {covered}");
        }
    }

    fn curve_from(points: &[(f64, f64, f64, usize)]) -> CoverageCurve {
        CoverageCurve {
            points: points
                .iter()
                .map(|&(alpha, cov, risk, n)| CurvePoint {
                    alpha,
                    achieved_coverage: cov,
                    accuracy: 1.0 - risk,
                    risk,
                    n_accepted: n,
                })
                .collect(),
        }
    }

    #[test]
    fn aurc_of_constant_risk_is_that_risk() {
        let grid = default_grid();
        let pts: Vec<(f64, f64, f64, usize)> =
            grid.iter().map(|&a| (a, a, 0.30, (a * 100.0) as usize)).collect();
        assert_abs_diff_eq!(aurc(&curve_from(&pts)).unwrap(), 0.30, epsilon = 1e-12);
    }

    #[test]
    fn aurc_of_zero_risk_is_zero() {
        let pts: Vec<(f64, f64, f64, usize)> =
            default_grid().iter().map(|&a| (a, a, 0.0, 1)).collect();
        assert_eq!(aurc(&curve_from(&pts)).unwrap(), 0.0);
    }

    #[test]
    fn aurc_of_linear_risk_matches_hand_integration() {
        // risk(alpha) = 0 at 0.05 rising linearly to 0.5 at 1.0.
        let grid = default_grid();
        let risk = |a: f64| 0.5 * (a - 0.05) / 0.95;
        let pts: Vec<(f64, f64, f64, usize)> =
            grid.iter().map(|&a| (a, a, risk(a), 1)).collect();
        // Oracle: constant 0 on [0, 0.05], then exact trapezoids.
        let mut expected = 0.0;
        let mut prev = (0.05, 0.0);
        for &a in &grid[1..] {
            let r = risk(a);
            expected += (a - prev.0) * 0.5 * (prev.1 + r);
            prev = (a, r);
        }
        assert_abs_diff_eq!(aurc(&curve_from(&pts)).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn unsorted_or_duplicate_alphas_are_rejected() {
        let bad = curve_from(&[(0.5, 0.5, 0.1, 1), (0.5, 0.6, 0.2, 2)]);
        assert!(matches!(aurc(&bad), Err(Error::InvalidCurve(_))));
        let unsorted = curve_from(&[(0.7, 0.5, 0.1, 1), (0.5, 0.6, 0.2, 2)]);
        assert!(matches!(aurc(&unsorted), Err(Error::InvalidCurve(_))));
    }

    #[test]
    fn operating_point_lookups() {
        let curve = curve_from(&[(0.5, 0.5, 0.1, 50), (0.7, 0.7, 0.2, 70), (1.0, 1.0, 0.3, 100)]);
        assert_eq!(curve.risk_at_coverage(0.7).unwrap(), 0.2);
        assert_eq!(curve.coverage_at_risk(0.25), 0.7);
        assert_eq!(curve.coverage_at_risk(0.05), 0.0);
        assert!(matches!(curve.risk_at_coverage(0.6), Err(Error::UnknownOperatingPoint(_))));
        // Risk at full coverage is one minus full-coverage accuracy.
        assert_abs_diff_eq!(
            curve.risk_at_coverage(1.0).unwrap(),
            1.0 - curve.points.last().unwrap().accuracy,
            epsilon = 1e-15
        );
    }

    #[test]
    fn curve_matches_brute_force_on_random_instances() {
        let mut rng = crate::rng::rng_from(16);
        for _ in 0..20 {
            let n = rng.random_range(5..40);
            let c = rng.random_range(2..6);
            let preds: Vec<EnsemblePrediction> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let sum: f64 = raw.iter().sum();
                    pred_with_entropy(
                        &raw.into_iter().map(|v| v / sum).collect::<Vec<_>>(),
                    )
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let cal_scores: Vec<f64> =
                (0..n).map(|_| rng.random::<f64>() * (c as f64).ln()).collect();
            let grid = default_grid();
            let policy = fit_thresholds(ScoreKind::Entropy, &cal_scores, &grid).unwrap();
            let curve = coverage_curve(&preds, &labels, &policy, &grid).unwrap();
            let mut last_accepted = 0usize;
            for point in &curve.points {
                let tau = policy.threshold(point.alpha).unwrap();
                let accepted: Vec<usize> = (0..n)
                    .filter(|&i| ScoreKind::Entropy.score(&preds[i]) <= tau)
                    .collect();
                let correct =
                    accepted.iter().filter(|&&i| preds[i].predicted_class == labels[i]).count();
                let acc = if accepted.is_empty() {
                    1.0
                } else {
                    correct as f64 / accepted.len() as f64
                };
                assert_eq!(point.n_accepted, accepted.len());
                assert_abs_diff_eq!(point.accuracy, acc, epsilon = 1e-12);
                assert_abs_diff_eq!(point.risk, 1.0 - acc, epsilon = 1e-12);
                assert_abs_diff_eq!(
                    point.achieved_coverage,
                    accepted.len() as f64 / n as f64,
                    epsilon = 1e-12
                );
                assert!(point.n_accepted >= last_accepted);
                last_accepted = point.n_accepted;
            }
        }
    }

    #[test]
    fn empty_accept_set_has_zero_risk() {
        let preds = vec![pred_with_entropy(&[0.5, 0.5])]; // entropy ln 2
        let labels = vec![0usize];
        let policy = SelectivePolicy {
            score_kind: ScoreKind::Entropy,
            thresholds: vec![(0.5, 0.01)], // below the minimum possible score here
        };
        let curve = coverage_curve(&preds, &labels, &policy, &[0.5]).unwrap();
        assert_eq!(curve.points[0].n_accepted, 0);
        assert_eq!(curve.points[0].accuracy, 1.0);
        assert_eq!(curve.points[0].risk, 0.0);
    }

    #[test]
    fn infinite_threshold_override_recovers_full_coverage() {
        let preds: Vec<EnsemblePrediction> = vec![
            pred_with_entropy(&[0.9, 0.1]),
            pred_with_entropy(&[0.4, 0.6]),
            pred_with_entropy(&[0.2, 0.8]),
        ];
        let labels = vec![0, 0, 1];
        let policy = SelectivePolicy {
            score_kind: ScoreKind::Entropy,
            thresholds: vec![(1.0, f64::INFINITY)],
        };
        let curve = coverage_curve(&preds, &labels, &policy, &[1.0]).unwrap();
        let full_acc = 2.0 / 3.0;
        assert_abs_diff_eq!(curve.points[0].accuracy, full_acc, epsilon = 1e-15);
        assert_eq!(curve.points[0].n_accepted, 3);
    }
}
