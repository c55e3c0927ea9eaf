//! Evaluation of a fixed decision rule on observed data.
//!
//! All estimators use Horvitz–Thompson (unnormalized) inverse-propensity
//! weights `w_i = 1{A_i = d_i} / π_i` averaged over the full sample size `n`.
//! The tail criterion is the Rockafellar–Uryasev form
//!
//! ```text
//! M0(d) = max_α (1/n) Σ_i w_i (α − (α − R_i)_+ / γ)
//! ```
//!
//! which is concave piecewise-affine in `α` with knots at the observed
//! outcomes, so it is maximized exactly by enumerating knots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, TrialDataset};

/// Default tail level.
pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum CriterionError {
    #[error("gamma must lie in {range}, got {gamma}")]
    Gamma { gamma: f64, range: &'static str },
    #[error("rule matches no record (zero matched mass)")]
    DegenerateMatch,
    #[error("predictions have length {found}, dataset has {expected} records")]
    Length { expected: usize, found: usize },
    #[error("weights must be nonnegative with at least one positive entry")]
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriterionKind {
    Value,
    Quantile,
    M0,
    M1,
}

/// Inverse-propensity weighting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Weighting {
    /// `(1/n) Σ w_i R_i`.
    #[default]
    HorvitzThompson,
    /// `Σ w_i R_i / Σ w_i`.
    Hajek,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub kind: CriterionKind,
    pub value: f64,
    /// Maximizing threshold (smallest maximizing knot) for M0 and M1.
    pub alpha: Option<f64>,
    pub gamma: f64,
    /// `(1/n) Σ 1{A_i = d_i} / π_i`.
    pub matched_mass: f64,
    /// Set when the rule matches no record.
    pub degenerate: bool,
}

/// Decisions of a rule on each record of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePredictions(pub Vec<Action>);

impl RulePredictions {
    pub fn constant(action: Action, n: usize) -> Self {
        Self(vec![action; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Action] {
        &self.0
    }
}

impl From<Vec<Action>> for RulePredictions {
    fn from(v: Vec<Action>) -> Self {
        Self(v)
    }
}

fn check_len(data: &TrialDataset, d: &RulePredictions) -> Result<(), CriterionError> {
    if d.len() != data.len() {
        return Err(CriterionError::Length {
            expected: data.len(),
            found: d.len(),
        });
    }
    Ok(())
}

fn check_gamma(gamma: f64, allow_one: bool) -> Result<(), CriterionError> {
    let ok = gamma > 0.0 && (gamma < 1.0 || (allow_one && gamma == 1.0));
    if ok {
        Ok(())
    } else {
        Err(CriterionError::Gamma {
            gamma,
            range: if allow_one { "(0, 1]" } else { "(0, 1)" },
        })
    }
}

/// Inverse-propensity weights `1{A_i = d_i} / π_i`.
pub fn match_weights(data: &TrialDataset, d: &RulePredictions) -> Vec<f64> {
    data.actions()
        .iter()
        .zip(d.as_slice())
        .zip(data.propensities())
        .map(|((a, di), p)| if a == di { 1.0 / p } else { 0.0 })
        .collect()
}

fn matched_points(data: &TrialDataset, d: &RulePredictions) -> (Vec<(f64, f64)>, f64) {
    let w = match_weights(data, d);
    let mass = w.iter().sum::<f64>() / data.len() as f64;
    let pts = data
        .outcomes()
        .iter()
        .zip(&w)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&r, &w)| (r, w))
        .collect();
    (pts, mass)
}

/// Maximizes `scale · Σ_i w_i (α − (α − y_i)_+ / γ)` over the knots `y_i`.
///
/// Returns `(value, α)` with the smallest maximizing knot. `points` is sorted
/// in place by outcome. Weights must be positive.
pub(crate) fn maximize_over_knots(points: &mut [(f64, f64)], scale: f64, gamma: f64) -> (f64, f64) {
    debug_assert!(!points.is_empty());
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = points.iter().map(|p| p.1).sum();
    // Running sums over points strictly below the current knot.
    let mut below_w = 0.0;
    let mut below_wy = 0.0;
    let mut best = (f64::NEG_INFINITY, points[0].0);
    let mut k = 0;
    while k < points.len() {
        let alpha = points[k].0;
        let obj = scale * (total * alpha - (below_w * alpha - below_wy) / gamma);
        if obj > best.0 {
            best = (obj, alpha);
        }
        // absorb every point tied at this knot
        while k < points.len() && points[k].0 == alpha {
            below_w += points[k].1;
            below_wy += points[k].1 * points[k].0;
            k += 1;
        }
    }
    best
}

/// Horvitz–Thompson value `(1/n) Σ R_i 1{A_i = d_i} / π_i`.
pub fn evaluate_value(data: &TrialDataset, d: &RulePredictions) -> Result<CriterionValue, CriterionError> {
    evaluate_value_weighted(data, d, Weighting::HorvitzThompson)
}

pub fn evaluate_value_weighted(
    data: &TrialDataset,
    d: &RulePredictions,
    weighting: Weighting,
) -> Result<CriterionValue, CriterionError> {
    check_len(data, d)?;
    let w = match_weights(data, d);
    let n = data.len() as f64;
    let total: f64 = w.iter().sum();
    let num: f64 = w.iter().zip(data.outcomes()).map(|(w, r)| w * r).sum();
    let degenerate = total == 0.0;
    let value = match (degenerate, weighting) {
        (true, _) => 0.0,
        (false, Weighting::HorvitzThompson) => num / n,
        (false, Weighting::Hajek) => num / total,
    };
    Ok(CriterionValue {
        kind: CriterionKind::Value,
        value,
        alpha: None,
        gamma: 1.0,
        matched_mass: total / n,
        degenerate,
    })
}

/// Weighted empirical `γ`-quantile of matched outcomes:
/// the smallest observed outcome `α` with `Σ_{R_i ≤ α} w_i ≥ γ Σ w_i`.
pub fn evaluate_quantile(
    data: &TrialDataset,
    d: &RulePredictions,
    gamma: f64,
) -> Result<CriterionValue, CriterionError> {
    check_len(data, d)?;
    check_gamma(gamma, false)?;
    let (mut pts, mass) = matched_points(data, d);
    if pts.is_empty() {
        return Err(CriterionError::DegenerateMatch);
    }
    let value = weighted_quantile(&mut pts, gamma);
    Ok(CriterionValue {
        kind: CriterionKind::Quantile,
        value,
        alpha: None,
        gamma,
        matched_mass: mass,
        degenerate: false,
    })
}

/// Smallest `y` with cumulative weight share `≥ level`. Sorts in place.
pub(crate) fn weighted_quantile(points: &mut [(f64, f64)], level: f64) -> f64 {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = points.iter().map(|p| p.1).sum();
    let target = level * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    for &(y, w) in points.iter() {
        cum += w;
        if cum >= target {
            return y;
        }
    }
    points[points.len() - 1].0
}

/// Empirical quantile of an unweighted sample (smallest `y` with
/// `#{y_i ≤ y} ≥ level · n`).
pub fn empirical_quantile(sample: &[f64], level: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = sample.iter().map(|&y| (y, 1.0)).collect();
    weighted_quantile(&mut pts, level)
}

/// Decision-rule CVaR `M0(d)` by knot enumeration.
pub fn evaluate_m0(data: &TrialDataset, d: &RulePredictions, gamma: f64) -> Result<CriterionValue, CriterionError> {
    check_len(data, d)?;
    check_gamma(gamma, true)?;
    let (mut pts, mass) = matched_points(data, d);
    if pts.is_empty() {
        return Ok(CriterionValue {
            kind: CriterionKind::M0,
            value: 0.0,
            alpha: None,
            gamma,
            matched_mass: 0.0,
            degenerate: true,
        });
    }
    let (value, alpha) = maximize_over_knots(&mut pts, 1.0 / data.len() as f64, gamma);
    Ok(CriterionValue {
        kind: CriterionKind::M0,
        value,
        alpha: Some(alpha),
        gamma,
        matched_mass: mass,
        degenerate: false,
    })
}

/// Mixed criterion `M1(d) = 0.5 V(d) + 0.5 M0(d)`.
pub fn evaluate_m1(data: &TrialDataset, d: &RulePredictions, gamma: f64) -> Result<CriterionValue, CriterionError> {
    let v = evaluate_value(data, d)?;
    let m0 = evaluate_m0(data, d, gamma)?;
    Ok(CriterionValue {
        kind: CriterionKind::M1,
        value: if m0.degenerate { 0.0 } else { 0.5 * v.value + 0.5 * m0.value },
        alpha: m0.alpha,
        gamma,
        matched_mass: m0.matched_mass,
        degenerate: m0.degenerate,
    })
}

/// Evaluates the named criterion (`Quantile` uses `gamma` as its level).
pub fn evaluate(
    kind: CriterionKind,
    data: &TrialDataset,
    d: &RulePredictions,
    gamma: f64,
) -> Result<CriterionValue, CriterionError> {
    match kind {
        CriterionKind::Value => evaluate_value(data, d),
        CriterionKind::Quantile => evaluate_quantile(data, d, gamma),
        CriterionKind::M0 => evaluate_m0(data, d, gamma),
        CriterionKind::M1 => evaluate_m1(data, d, gamma),
    }
}

/// Weighted empirical CVaR of a sample, `sup_α {α − E_w[(α − Y)_+]/γ}` with
/// weights normalized to sum to one. Returns `(value, α)`.
pub fn cvar_scalar(sample: &[f64], weights: &[f64], gamma: f64) -> Result<(f64, f64), CriterionError> {
    check_gamma(gamma, true)?;
    if sample.len() != weights.len() {
        return Err(CriterionError::Length {
            expected: sample.len(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(CriterionError::Weights);
    }
    let mut pts: Vec<(f64, f64)> = sample
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&y, &w)| (y, w))
        .collect();
    let total: f64 = pts.iter().map(|p| p.1).sum();
    if pts.is_empty() || !(total > 0.0) {
        return Err(CriterionError::Weights);
    }
    Ok(maximize_over_knots(&mut pts, 1.0 / total, gamma))
}
