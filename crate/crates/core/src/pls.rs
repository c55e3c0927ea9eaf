//! l1-penalized least squares on the basis `(1, X, A, X·A)`; the rule picks
//! the action with the larger fitted mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Action, Scaling, TrialDataset};
use crate::model::{soft_threshold, Rule};

#[derive(Debug, Error, PartialEq)]
pub enum PlsError {
    #[error("lambda must be nonnegative and finite, got {0}")]
    Lambda(f64),
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlsOptions {
    /// Stop when no coordinate moves the fit by more than this (in units of
    /// the coordinate's standard deviation).
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for PlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 10_000,
        }
    }
}

/// Coefficients ordered as `(intercept, β_X[0..p], β_A, β_XA[0..p])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    pub dim: usize,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub sweeps: usize,
    #[serde(default)]
    pub scaling: Option<Scaling>,
}

/// Row of the expanded design for covariates `x` and action `a`.
pub fn basis(x: &[f64], a: Action) -> Vec<f64> {
    let s = a.sign();
    let mut z = Vec::with_capacity(2 * x.len() + 2);
    z.push(1.0);
    z.extend_from_slice(x);
    z.push(s);
    z.extend(x.iter().map(|v| v * s));
    z
}

impl PlsModel {
    /// Treatment contrast `(β_XA, β_A)`, i.e. half the fitted mean difference
    /// between the two actions as a linear function of `x`.
    pub fn contrast(&self) -> (Vec<f64>, f64) {
        let p = self.dim;
        (self.coefficients[p + 2..].to_vec(), self.coefficients[p + 1])
    }

    pub fn predict_mean(&self, x: &[f64], a: Action) -> f64 {
        basis(x, a).iter().zip(&self.coefficients).map(|(z, b)| z * b).sum()
    }

    /// `(1/n) Σ (R_i − z_iβ)² + λ ‖β_{−0}‖₁`.
    pub fn objective(&self, data: &TrialDataset) -> f64 {
        objective(data, &self.coefficients, self.lambda)
    }
}

fn objective(data: &TrialDataset, beta: &[f64], lambda: f64) -> f64 {
    let n = data.len() as f64;
    let rss: f64 = (0..data.len())
        .map(|i| {
            let z = basis(data.x(i), data.actions()[i]);
            let fit: f64 = z.iter().zip(beta).map(|(a, b)| a * b).sum();
            (data.outcomes()[i] - fit).powi(2)
        })
        .sum();
    rss / n + lambda * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
}

/// `sign(β_A + x·β_XA)` with `sign(0) = +1`.
pub fn pls_rule(model: &PlsModel, x: &[f64]) -> Action {
    let (w, b) = model.contrast();
    Action::from_score(w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
}

/// Closed-form coordinate update: `soft(ρ, λ/2) / a` with
/// `ρ = (1/n) Σ z_ij r_i^{(−j)}` and `a = (1/n) Σ z_ij²`.
pub fn coordinate_update(rho: f64, a: f64, lambda: f64, penalized: bool) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    if penalized {
        soft_threshold(rho, 0.5 * lambda) / a
    } else {
        rho / a
    }
}

/// Cyclic coordinate descent for the l1-penalized least-squares fit.
pub fn pls_fit(data: &TrialDataset, lambda: f64, options: &PlsOptions) -> Result<PlsModel, PlsError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(PlsError::Lambda(lambda));
    }
    if data.is_empty() {
        return Err(PlsError::Empty);
    }
    let n = data.len();
    let k = 2 * data.dim() + 2;
    // column-major design
    let mut z = vec![0.0; n * k];
    for i in 0..n {
        for (j, v) in basis(data.x(i), data.actions()[i]).into_iter().enumerate() {
            z[j * n + i] = v;
        }
    }
    let col_sq: Vec<f64> = (0..k).map(|j| z[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>() / n as f64).collect();
    let mut beta = vec![0.0; k];
    let mut resid = data.outcomes().to_vec();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < options.max_sweeps {
        sweeps += 1;
        let mut max_move = 0.0f64;
        for j in 0..k {
            let col = &z[j * n..(j + 1) * n];
            let a = col_sq[j];
            if a == 0.0 {
                continue;
            }
            let rho = col.iter().zip(&resid).map(|(z, r)| z * r).sum::<f64>() / n as f64 + a * beta[j];
            let new = coordinate_update(rho, a, lambda, j > 0);
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, z) in resid.iter_mut().zip(col) {
                    *r -= delta * z;
                }
                beta[j] = new;
                max_move = max_move.max(delta.abs() * a.sqrt());
            }
        }
        if max_move <= options.tol {
            converged = true;
            break;
        }
    }
    Ok(PlsModel {
        dim: data.dim(),
        coefficients: beta,
        lambda,
        converged,
        sweeps,
        scaling: data.scaling().cloned(),
    })
}

/// Largest KKT violation: `|∇_j + λ sign(β_j)|` on active coordinates and
/// `max(|∇_j| − λ, 0)` on inactive ones (the intercept must have `∇_0 = 0`).
pub fn kkt_violation(model: &PlsModel, data: &TrialDataset) -> f64 {
    let n = data.len() as f64;
    let k = model.coefficients.len();
    let mut grad = vec![0.0; k];
    for i in 0..data.len() {
        let z = basis(data.x(i), data.actions()[i]);
        let r = data.outcomes()[i] - z.iter().zip(&model.coefficients).map(|(a, b)| a * b).sum::<f64>();
        for (g, zj) in grad.iter_mut().zip(&z) {
            *g -= 2.0 * zj * r / n;
        }
    }
    grad.iter()
        .zip(&model.coefficients)
        .enumerate()
        .map(|(j, (&g, &b))| {
            if j == 0 {
                g.abs()
            } else if b != 0.0 {
                (g + model.lambda * b.signum()).abs()
            } else {
                (g.abs() - model.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

impl Rule for PlsModel {
    fn decide_x(&self, x: &[f64]) -> Action {
        match &self.scaling {
            Some(s) => {
                let mut v = x.to_vec();
                s.apply(&mut v);
                pls_rule(self, &v)
            }
            None => pls_rule(self, x),
        }
    }

    fn decide_scaled(&self, x: &[f64]) -> Action {
        pls_rule(self, x)
    }
}
