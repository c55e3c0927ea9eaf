//! Simulation scenarios with both potential outcomes materialized, and the
//! out-of-sample metrics used to compare fitted rules.
//!
//! Outcomes follow `R(a) = 1 + x1 + x2 + a·δ(x) + ε` with a single `ε` shared
//! by both actions, except for the toy design whose outcome law depends only
//! on whether `x·a = 1`. Normal parameters are (mean, variance); for
//! lognormal errors the parameters belong to the underlying normal.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Weibull};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};
use thiserror::Error;

use crate::criteria::empirical_quantile;
use crate::data::{Action, TrialDataset};
use crate::model::Rule;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("scenario {scenario} needs at least {needed} covariates, got {found}")]
    Dimension { scenario: ScenarioId, needed: usize, found: usize },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("scenario {0} has no known optimal rule, so misclassification is undefined")]
    UnsupportedMetric(ScenarioId),
    #[error("quantile level must lie in (0, 1), got {0}")]
    Level(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioId {
    Toy,
    Shift1,
    Shift2,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 11] = [
        ScenarioId::Toy,
        ScenarioId::Shift1,
        ScenarioId::Shift2,
        ScenarioId::S1,
        ScenarioId::S2,
        ScenarioId::S3,
        ScenarioId::S4,
        ScenarioId::S5,
        ScenarioId::S6,
        ScenarioId::S7,
        ScenarioId::S8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::Toy => "toy",
            ScenarioId::Shift1 => "shift1",
            ScenarioId::Shift2 => "shift2",
            ScenarioId::S1 => "s1",
            ScenarioId::S2 => "s2",
            ScenarioId::S3 => "s3",
            ScenarioId::S4 => "s4",
            ScenarioId::S5 => "s5",
            ScenarioId::S6 => "s6",
            ScenarioId::S7 => "s7",
            ScenarioId::S8 => "s8",
        }
    }

    /// Stable small integer used to derive random streams.
    pub fn index(self) -> u64 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u64
    }

    fn min_dim(self) -> usize {
        match self {
            ScenarioId::Toy => 1,
            ScenarioId::S5 | ScenarioId::S6 | ScenarioId::S7 | ScenarioId::S8 => 2,
            _ => 3,
        }
    }

    pub fn has_optimal_rule(self) -> bool {
        self != ScenarioId::Toy
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "");
        let key = key.strip_prefix("scenario").unwrap_or(&key);
        ScenarioId::ALL
            .iter()
            .copied()
            .find(|id| id.name() == key || key.parse::<usize>().ok().map(|k| format!("s{k}")).as_deref() == Some(id.name()))
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n: usize,
    pub p: usize,
}

impl ScenarioSpec {
    /// `n = 200`; `p = 20`, or a single binary covariate for the toy design.
    pub fn new(id: ScenarioId) -> Self {
        Self {
            id,
            n: 200,
            p: if id == ScenarioId::Toy { 1 } else { 20 },
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::EmptySample);
        }
        if self.p < self.id.min_dim() {
            return Err(SimError::Dimension {
                scenario: self.id,
                needed: self.id.min_dim(),
                found: self.p,
            });
        }
        Ok(())
    }

    /// Treatment contrast `δ(x)`; `None` for the toy design.
    pub fn delta(&self, x: &[f64]) -> Option<f64> {
        use ScenarioId::*;
        match self.id {
            Toy => None,
            Shift1 | Shift2 | S1 | S2 | S3 | S4 => Some(x[0] - x[1] + x[2]),
            S5 | S6 | S7 | S8 => Some(3.8 * (0.8 - x[0] * x[0] - x[1] * x[1])),
        }
    }

    fn draw_x<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.id {
            ScenarioId::Toy => vec![if rng.gen_bool(0.5) { 1.0 } else { -1.0 }],
            ScenarioId::Shift1 => {
                let gauss = Normal::new(0.0, 1.0).unwrap();
                let log = Normal::new(0.0, 2f64.sqrt()).unwrap();
                (0..self.p)
                    .map(|_| if rng.gen_bool(0.7) { gauss.sample(rng) } else { log.sample(rng).exp() })
                    .collect()
            }
            _ => (0..self.p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn draw_noise<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        use ScenarioId::*;
        match self.id {
            Toy => unreachable!("the toy design draws its own outcomes"),
            Shift1 => Normal::new(0.0, 1.0).unwrap().sample(rng),
            Shift2 => {
                if rng.gen_bool(0.7) {
                    Normal::new(0.0, 1.0).unwrap().sample(rng)
                } else {
                    Normal::new(0.0, 2f64.sqrt()).unwrap().sample(rng).exp()
                }
            }
            S1 | S5 => Normal::new(0.0, 2.0).unwrap().sample(rng),
            S2 | S6 => {
                let var = 2.0 * (1.0 + x[0] + x[1]).abs();
                Normal::new(0.0, var.sqrt()).unwrap().sample(rng).exp()
            }
            S3 | S7 => Normal::new(0.0, 2f64.sqrt()).unwrap().sample(rng).exp(),
            S4 | S8 => Weibull::new(0.5, 0.3).unwrap().sample(rng),
        }
    }

    /// Covariates and both potential outcomes for one subject.
    fn draw_subject<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64, f64) {
        let x = self.draw_x(rng);
        if self.id == ScenarioId::Toy {
            let e1 = Normal::new(-0.1, 1.0).unwrap().sample(rng);
            let e2 = Normal::new(0.0, 0.5f64.sqrt()).unwrap().sample(rng);
            // x·a = 1 selects ε1
            let (plus, minus) = if x[0] > 0.0 { (e1, e2) } else { (e2, e1) };
            return (x, plus, minus);
        }
        let base = 1.0 + x[0] + x[1] + self.draw_noise(&x, rng);
        let d = self.delta(&x).unwrap();
        (x, base + d, base - d)
    }

    /// Fresh subjects with both potential outcomes; actions are assigned
    /// uniformly at random.
    pub fn draw_population<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PotentialSample, SimError> {
        self.validate()?;
        if n == 0 {
            return Err(SimError::EmptySample);
        }
        let mut s = PotentialSample {
            dim: self.p,
            covariates: Vec::with_capacity(n * self.p),
            outcome_plus: Vec::with_capacity(n),
            outcome_minus: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            propensity: 0.5,
            optimal: self.id.has_optimal_rule().then(Vec::new),
        };
        for _ in 0..n {
            let (x, plus, minus) = self.draw_subject(rng);
            let a = if rng.gen_bool(0.5) { Action::Plus } else { Action::Minus };
            if let Some(opt) = s.optimal.as_mut() {
                opt.push(Action::from_score(self.delta(&x).unwrap()));
            }
            s.covariates.extend_from_slice(&x);
            s.outcome_plus.push(plus);
            s.outcome_minus.push(minus);
            s.actions.push(a);
        }
        Ok(s)
    }

    /// Training data of size `n` plus its potential-outcome annotations.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(TrialDataset, PotentialSample), SimError> {
        let sample = self.draw_population(self.n, rng)?;
        Ok((sample.observed(), sample))
    }

    /// Share of fresh subjects whose decision differs from `sign(δ(x))`.
    pub fn misclassification<R: Rng + ?Sized>(&self, rule: &dyn Rule, n_test: usize, rng: &mut R) -> Result<f64, SimError> {
        if !self.id.has_optimal_rule() {
            return Err(SimError::UnsupportedMetric(self.id));
        }
        self.draw_population(n_test, rng)?.misclassification(rule)
    }

    /// Mean and requested quantiles of `R(d(X))` over fresh subjects.
    pub fn value_metrics<R: Rng + ?Sized>(&self, rule: &dyn Rule, n_test: usize, rng: &mut R, levels: &[f64]) -> Result<ValueMetrics, SimError> {
        self.draw_population(n_test, rng)?.value_metrics(rule, levels)
    }
}

/// Subjects with both potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSample {
    pub dim: usize,
    pub covariates: Vec<f64>,
    pub outcome_plus: Vec<f64>,
    pub outcome_minus: Vec<f64>,
    pub actions: Vec<Action>,
    pub propensity: f64,
    /// `sign(δ(x))` where the scenario defines `δ`.
    pub optimal: Option<Vec<Action>>,
}

impl PotentialSample {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn potential(&self, i: usize, a: Action) -> f64 {
        match a {
            Action::Plus => self.outcome_plus[i],
            Action::Minus => self.outcome_minus[i],
        }
    }

    /// The trial as observed: each subject reveals only its assigned outcome.
    pub fn observed(&self) -> TrialDataset {
        let outcomes = (0..self.len()).map(|i| self.potential(i, self.actions[i])).collect();
        TrialDataset::new(
            self.dim,
            self.covariates.clone(),
            self.actions.clone(),
            outcomes,
            vec![self.propensity; self.len()],
            crate::data::DEFAULT_OVERLAP,
        )
        .expect("simulated trials are well formed")
    }

    pub fn decisions(&self, rule: &dyn Rule) -> Vec<Action> {
        (0..self.len()).map(|i| rule.decide_x(self.x(i))).collect()
    }

    pub fn misclassification(&self, rule: &dyn Rule) -> Result<f64, SimError> {
        let optimal = self.optimal.as_ref().ok_or(SimError::UnsupportedMetric(ScenarioId::Toy))?;
        let wrong = self.decisions(rule).iter().zip(optimal).filter(|(d, o)| d != o).count();
        Ok(wrong as f64 / self.len() as f64)
    }

    /// Counterfactual outcomes `R_i(d(X_i))`.
    pub fn counterfactual(&self, decisions: &[Action]) -> Vec<f64> {
        decisions.iter().enumerate().map(|(i, &d)| self.potential(i, d)).collect()
    }

    pub fn value_metrics(&self, rule: &dyn Rule, levels: &[f64]) -> Result<ValueMetrics, SimError> {
        if let Some(&bad) = levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
            return Err(SimError::Level(bad));
        }
        let r = self.counterfactual(&self.decisions(rule));
        Ok(ValueMetrics {
            mean: r.iter().sum::<f64>() / r.len() as f64,
            quantiles: levels.iter().map(|&l| (l, empirical_quantile(&r, l))).collect(),
        })
    }

    /// Misclassification (where defined) and value metrics on one sample.
    pub fn evaluate(&self, rule: &dyn Rule, levels: &[f64]) -> Result<RuleEvaluation, SimError> {
        let v = self.value_metrics(rule, levels)?;
        Ok(RuleEvaluation {
            misclassification: self.optimal.as_ref().map(|_| self.misclassification(rule)).transpose()?,
            value_mean: v.mean,
            quantiles: v.quantiles,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueMetrics {
    pub mean: f64,
    /// `(level, empirical quantile)` pairs in the requested order.
    pub quantiles: Vec<(f64, f64)>,
}

impl ValueMetrics {
    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles.iter().find(|(l, _)| *l == level).map(|q| q.1)
    }
}

/// Metrics of one fitted rule on one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEvaluation {
    pub misclassification: Option<f64>,
    pub value_mean: f64,
    pub quantiles: Vec<(f64, f64)>,
}

impl RuleEvaluation {
    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles.iter().find(|(l, _)| *l == level).map(|q| q.1)
    }
}

/// Aggregate over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub replications: usize,
    pub misclass_mean: Option<f64>,
    pub misclass_sd: Option<f64>,
    pub value_mean: f64,
    /// `(level, mean over replications of that quantile)`.
    pub quantile_means: Vec<(f64, f64)>,
    pub raw: Vec<RuleEvaluation>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

impl EvaluationReport {
    /// Summarizes replications; `None` when there are none.
    pub fn from_replications(raw: Vec<RuleEvaluation>) -> Option<Self> {
        if raw.is_empty() {
            return None;
        }
        let mis: Vec<f64> = raw.iter().filter_map(|r| r.misclassification).collect();
        let (misclass_mean, misclass_sd) = if mis.len() == raw.len() {
            let (m, s) = mean_sd(&mis);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        let value_mean = mean_sd(&raw.iter().map(|r| r.value_mean).collect::<Vec<_>>()).0;
        let quantile_means = raw[0]
            .quantiles
            .iter()
            .map(|&(l, _)| (l, mean_sd(&raw.iter().filter_map(|r| r.quantile(l)).collect::<Vec<_>>()).0))
            .collect();
        Some(Self {
            replications: raw.len(),
            misclass_mean,
            misclass_sd,
            value_mean,
            quantile_means,
            raw,
        })
    }

    pub fn quantile_mean(&self, level: f64) -> Option<f64> {
        self.quantile_means.iter().find(|(l, _)| *l == level).map(|q| q.1)
    }
}

/// CVaR of `N(μ, σ²)` at level `γ`: `μ − σ φ(Φ⁻¹(γ)) / γ`.
pub fn normal_cvar(mu: f64, sigma: f64, gamma: f64) -> f64 {
    let std = StatNormal::new(0.0, 1.0).unwrap();
    mu - sigma * std.pdf(std.inverse_cdf(gamma)) / gamma
}
