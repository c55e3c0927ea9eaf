//! Scoring functions `f` whose sign is the decision rule: a linear form
//! `w·x + b` or a Gaussian-kernel expansion `Σ_k w_k K(x, anchor_k) + b`
//! with `K(x, x') = exp(−‖x − x'‖² / ς²)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, Scaling, TrialDataset};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("covariate vector has length {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    /// `(λ/2)‖w‖²`
    L2,
    /// `λ‖w‖₁`
    L1,
    /// `(λ/2) wᵀKw`
    RkhsNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelForm {
    Linear {
        dim: usize,
    },
    Kernel {
        dim: usize,
        bandwidth: f64,
        /// Row-major copy of the training covariates.
        anchors: Vec<f64>,
    },
}

/// A fitted (or initial) scoring function with its regularization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionFunction {
    pub form: ModelForm,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub penalty: Penalty,
    pub lambda: f64,
    /// Transform mapping raw covariates into the space the model was fitted in.
    #[serde(default)]
    pub scaling: Option<Scaling>,
}

#[inline]
pub fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (bandwidth * bandwidth)).exp()
}

/// Symmetric Gram matrix of the rows of a flat row-major matrix.
pub fn gram_matrix(rows: &[f64], dim: usize, bandwidth: f64) -> Vec<f64> {
    let m = rows.len() / dim;
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        k[i * m + i] = 1.0;
        for j in 0..i {
            let v = gaussian_kernel(&rows[i * dim..(i + 1) * dim], &rows[j * dim..(j + 1) * dim], bandwidth);
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
    }
    k
}

/// Median pairwise Euclidean distance between rows (the bandwidth heuristic).
pub fn median_distance(rows: &[f64], dim: usize) -> f64 {
    let m = rows.len() / dim;
    let mut d = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in 0..i {
            let s: f64 = rows[i * dim..(i + 1) * dim]
                .iter()
                .zip(&rows[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    }
}

/// `sign(v) · max(|v| − t, 0)`.
#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Proximal map of `t·λ‖·‖₁` applied coordinate-wise.
pub fn prox_l1(weights: &[f64], threshold: f64) -> Vec<f64> {
    weights.iter().map(|&w| soft_threshold(w, threshold)).collect()
}

/// Gradient (smooth penalties) or proximal operator (L1) of the penalty.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyStep {
    Gradient(Vec<f64>),
    Prox { lambda: f64 },
}

impl PenaltyStep {
    /// For `Prox`, applies `prox_{tλ‖·‖₁}` to `w`.
    pub fn apply_prox(&self, w: &[f64], step: f64) -> Vec<f64> {
        match self {
            PenaltyStep::Prox { lambda } => prox_l1(w, step * lambda),
            PenaltyStep::Gradient(_) => w.to_vec(),
        }
    }
}

impl DecisionFunction {
    pub fn zeros_linear(dim: usize, penalty: Penalty, lambda: f64) -> Self {
        Self {
            form: ModelForm::Linear { dim },
            weights: vec![0.0; dim],
            intercept: 0.0,
            penalty,
            lambda,
            scaling: None,
        }
    }

    pub fn zeros_kernel(anchors: &TrialDataset, bandwidth: f64, penalty: Penalty, lambda: f64) -> Self {
        Self {
            form: ModelForm::Kernel {
                dim: anchors.dim(),
                bandwidth,
                anchors: anchors.covariates().to_vec(),
            },
            weights: vec![0.0; anchors.len()],
            intercept: 0.0,
            penalty,
            lambda,
            scaling: None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.form {
            ModelForm::Linear { dim } | ModelForm::Kernel { dim, .. } => *dim,
        }
    }

    /// Checks the structural invariants (weight length, bandwidth, λ ≥ 0).
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda >= 0.0) {
            return Err(ModelError::Invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        match &self.form {
            ModelForm::Linear { dim } => {
                if self.weights.len() != *dim {
                    return Err(ModelError::Invalid("linear weights must have length p".into()));
                }
                if self.penalty == Penalty::RkhsNorm {
                    return Err(ModelError::Invalid("RKHS-norm penalty requires the kernel form".into()));
                }
            }
            ModelForm::Kernel { dim, bandwidth, anchors } => {
                if !(*bandwidth > 0.0) {
                    return Err(ModelError::Invalid("kernel bandwidth must be positive".into()));
                }
                if *dim == 0 || anchors.len() != self.weights.len() * dim {
                    return Err(ModelError::Invalid("kernel weights must match the anchor count".into()));
                }
            }
        }
        Ok(())
    }

    /// Score of a covariate vector already in the model's (scaled) space.
    pub fn score(&self, x: &[f64]) -> Result<f64, ModelError> {
        let dim = self.dim();
        if x.len() != dim {
            return Err(ModelError::Dimension {
                expected: dim,
                found: x.len(),
            });
        }
        Ok(self.score_unchecked(x))
    }

    #[inline]
    pub(crate) fn score_unchecked(&self, x: &[f64]) -> f64 {
        match &self.form {
            ModelForm::Linear { .. } => self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercept,
            ModelForm::Kernel { dim, bandwidth, anchors } => {
                self.weights
                    .iter()
                    .zip(anchors.chunks(*dim))
                    .map(|(w, a)| w * gaussian_kernel(x, a, *bandwidth))
                    .sum::<f64>()
                    + self.intercept
            }
        }
    }

    /// Score of raw covariates: applies the stored scaling first.
    pub fn score_raw(&self, x: &[f64]) -> Result<f64, ModelError> {
        match &self.scaling {
            Some(s) => {
                let mut v = x.to_vec();
                if v.len() != self.dim() {
                    return Err(ModelError::Dimension {
                        expected: self.dim(),
                        found: v.len(),
                    });
                }
                s.apply(&mut v);
                self.score(&v)
            }
            None => self.score(x),
        }
    }

    /// `sign(f(x))` with `sign(0) = +1`.
    pub fn decide(&self, x: &[f64]) -> Result<Action, ModelError> {
        self.score(x).map(Action::from_score)
    }

    pub fn penalty_value(&self) -> f64 {
        match self.penalty {
            Penalty::L2 => 0.5 * self.lambda * self.weights.iter().map(|w| w * w).sum::<f64>(),
            Penalty::L1 => self.lambda * self.weights.iter().map(|w| w.abs()).sum::<f64>(),
            Penalty::RkhsNorm => {
                let kw = self.gram_times_weights();
                0.5 * self.lambda * self.weights.iter().zip(&kw).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }

    /// Gradient with respect to the weights (intercept is never penalized) for
    /// smooth penalties; the L1 penalty exposes its proximal map instead.
    pub fn penalty_gradient_or_prox(&self) -> PenaltyStep {
        match self.penalty {
            Penalty::L2 => PenaltyStep::Gradient(self.weights.iter().map(|w| self.lambda * w).collect()),
            Penalty::L1 => PenaltyStep::Prox { lambda: self.lambda },
            Penalty::RkhsNorm => {
                PenaltyStep::Gradient(self.gram_times_weights().into_iter().map(|v| self.lambda * v).collect())
            }
        }
    }

    fn gram_times_weights(&self) -> Vec<f64> {
        match &self.form {
            ModelForm::Kernel { dim, bandwidth, anchors } => {
                let k = gram_matrix(anchors, *dim, *bandwidth);
                let m = self.weights.len();
                (0..m)
                    .map(|i| (0..m).map(|j| k[i * m + j] * self.weights[j]).sum())
                    .collect()
            }
            // the anchor Gram of a linear model is not defined; fall back to ‖w‖²
            ModelForm::Linear { .. } => self.weights.clone(),
        }
    }
}

/// Anything that maps a covariate vector to an action.
pub trait Rule: Send + Sync {
    /// Decision for raw covariates.
    fn decide_x(&self, x: &[f64]) -> Action;

    /// Decision for covariates already transformed by the rule's scaling.
    fn decide_scaled(&self, x: &[f64]) -> Action {
        self.decide_x(x)
    }

    /// Decisions on every record of a dataset. A dataset that carries a
    /// scaling is taken to be in the rule's transformed space already.
    fn predict(&self, data: &TrialDataset) -> crate::criteria::RulePredictions {
        let scaled = data.scaling().is_some();
        (0..data.len())
            .map(|i| if scaled { self.decide_scaled(data.x(i)) } else { self.decide_x(data.x(i)) })
            .collect::<Vec<_>>()
            .into()
    }
}

impl Rule for DecisionFunction {
    fn decide_x(&self, x: &[f64]) -> Action {
        match &self.scaling {
            Some(s) => {
                let mut v = x.to_vec();
                s.apply(&mut v);
                Action::from_score(self.score_unchecked(&v))
            }
            None => Action::from_score(self.score_unchecked(x)),
        }
    }

    fn decide_scaled(&self, x: &[f64]) -> Action {
        Action::from_score(self.score_unchecked(x))
    }
}

impl<F: Fn(&[f64]) -> Action + Send + Sync> Rule for F {
    fn decide_x(&self, x: &[f64]) -> Action {
        self(x)
    }
}

/// Persisted fitted rule of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum RuleModel {
    Surrogate(DecisionFunction),
    LeastSquares(crate::pls::PlsModel),
    /// Rule from alternating maximization, fitted on covariates transformed
    /// by `scaling`.
    Alternating {
        rule: crate::alternate::AltRule,
        #[serde(default)]
        scaling: Option<Scaling>,
    },
}

impl Rule for RuleModel {
    fn decide_x(&self, x: &[f64]) -> Action {
        match self {
            RuleModel::Surrogate(m) => m.decide_x(x),
            RuleModel::LeastSquares(m) => m.decide_x(x),
            RuleModel::Alternating { rule, scaling } => match scaling {
                Some(sc) => {
                    let mut z = x.to_vec();
                    sc.apply(&mut z);
                    rule.decide_scaled(&z)
                }
                None => rule.decide_scaled(x),
            },
        }
    }

    fn decide_scaled(&self, x: &[f64]) -> Action {
        match self {
            RuleModel::Surrogate(m) => m.decide_scaled(x),
            RuleModel::LeastSquares(m) => m.decide_scaled(x),
            RuleModel::Alternating { rule, .. } => rule.decide_scaled(x),
        }
    }
}

impl RuleModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("models serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
