//! Difference-of-convex fitting of CVaR-optimal scoring functions.
//!
//! With the surrogate `S = S1 − S2`, the joint problem over `(f, α)` reduces
//! to `min_f min_j G_j(f) + pen(f)` where `G_j(f) = (1/n) Σ_i c_ij S(A_i f(X_i))`
//! and `c_ij` substitutes the knot `α = R_j`. Each `G_j` splits as `F_j − H_j`
//! with convex pieces, and the enhanced probabilistic DCA repeatedly linearizes
//! the concave part at a knot drawn from the ε-argmax set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrialDataset;
use crate::model::{gaussian_kernel, gram_matrix, soft_threshold, DecisionFunction, ModelError, ModelForm, Penalty};
use crate::surrogate::SurrogateParams;

/// Largest `n` for which [`KnotCoefficients::matrix`] materializes `c`.
pub const MATERIALIZE_LIMIT: usize = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum DcaError {
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("knot index {index} is out of range for {n} records")]
    KnotIndex { index: usize, n: usize },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which criterion the surrogate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    #[default]
    M0,
    M1,
}

/// Choice of the common convex part `F` in `G̃ = F − max_j h_j + pen`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decomposition {
    /// `F = Σ_j F_j`.
    SumOfKnots,
    /// `F = (1/n) Σ_i [max_j c⁺_ij S1 + max_j c⁻_ij S2]`, the smallest
    /// per-record majorant that keeps every `F − G_j` convex.
    Envelope,
    /// Each outer step majorizes only the drawn `G_j = F_j − H_j` by
    /// linearizing `H_j`; the bound is tightest but `F` changes with `j`.
    #[default]
    Knotwise,
}

fn check_gamma(gamma: f64) -> Result<(), DcaError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(DcaError::Gamma(gamma))
    }
}

/// `c_ij = (a R_i + b R_j + c (R_j − R_i)_+) / π_i`, never materialized
/// unless asked for.
#[derive(Debug, Clone)]
pub struct KnotCoefficients {
    a: f64,
    b: f64,
    c: f64,
    outcomes: Vec<f64>,
    inv_prop: Vec<f64>,
    /// Record indices sorted by outcome.
    order: Vec<usize>,
}

impl KnotCoefficients {
    pub fn new(data: &TrialDataset, gamma: f64, target: Target) -> Result<Self, DcaError> {
        check_gamma(gamma)?;
        if data.is_empty() {
            return Err(DcaError::Empty);
        }
        let (a, b, c) = match target {
            Target::M0 => (0.0, -1.0, 1.0 / gamma),
            Target::M1 => (-0.5, -0.5, 0.5 / gamma),
        };
        let outcomes = data.outcomes().to_vec();
        let mut order: Vec<usize> = (0..outcomes.len()).collect();
        order.sort_by(|&i, &j| outcomes[i].total_cmp(&outcomes[j]));
        Ok(Self {
            a,
            b,
            c,
            inv_prop: data.propensities().iter().map(|p| 1.0 / p).collect(),
            outcomes,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (ri, rj) = (self.outcomes[i], self.outcomes[j]);
        (self.a * ri + self.b * rj + self.c * (rj - ri).max(0.0)) * self.inv_prop[i]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i, j)).collect()
    }

    /// Row-major `n × n` matrix, or `None` above [`MATERIALIZE_LIMIT`].
    pub fn matrix(&self) -> Option<Vec<f64>> {
        let n = self.len();
        (n <= MATERIALIZE_LIMIT).then(|| (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect())
    }

    /// `(min_j c_ij, max_j c_ij)`. As a function of `R_j` the coefficient is
    /// convex piecewise linear with its minimum at `R_j = R_i`, so the
    /// extremes sit at `j = i` and at the outcome range endpoints.
    pub fn row_range(&self, i: usize) -> (f64, f64) {
        let lo = self.order[0];
        let hi = self.order[self.len() - 1];
        let at = [self.get(i, i), self.get(i, lo), self.get(i, hi)];
        (
            at.iter().copied().fold(f64::INFINITY, f64::min),
            at.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    /// `(Σ_j max(c_ij, 0), Σ_j max(−c_ij, 0))`.
    pub fn row_sign_sums(&self, i: usize) -> (f64, f64) {
        (0..self.len()).fold((0.0, 0.0), |(p, q), j| {
            let c = self.get(i, j);
            (p + c.max(0.0), q + (-c).max(0.0))
        })
    }

    /// `(1/n) Σ_i v_i c_ij` for a single knot.
    pub fn knot_value(&self, v: &[f64], j: usize) -> f64 {
        (0..self.len()).map(|i| v[i] * self.get(i, j)).sum::<f64>() / self.len() as f64
    }

    /// `(1/n) Σ_i v_i c_ij` for every knot `j` in `O(n)` using the outcome
    /// order fixed at construction.
    pub fn knot_values(&self, v: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut t0 = 0.0;
        let mut t1 = 0.0;
        for i in 0..n {
            let s = v[i] * self.inv_prop[i];
            t0 += s;
            t1 += s * self.outcomes[i];
        }
        let mut out = vec![0.0; n];
        let mut below0 = 0.0;
        let mut below1 = 0.0;
        let mut k = 0;
        while k < n {
            let r = self.outcomes[self.order[k]];
            let g = (self.a * t1 + self.b * r * t0 + self.c * (r * below0 - below1)) / n as f64;
            let start = k;
            while k < n && self.outcomes[self.order[k]] == r {
                out[self.order[k]] = g;
                k += 1;
            }
            for &i in &self.order[start..k] {
                let s = v[i] * self.inv_prop[i];
                below0 += s;
                below1 += s * self.outcomes[i];
            }
        }
        out
    }
}

/// `(1/n) Σ_i [p_i S1(u_i) + q_i S2(u_i)]` with `p, q ≥ 0`: a convex C¹
/// function of the margins `u_i = A_i f(X_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginFunctional {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub surrogate: SurrogateParams,
}

impl MarginFunctional {
    pub fn value(&self, u: &[f64]) -> f64 {
        let s = &self.surrogate;
        let total: f64 = u
            .iter()
            .zip(self.p.iter().zip(&self.q))
            .map(|(&u, (&p, &q))| p * s.s1(u) + q * s.s2(u))
            .sum();
        total / u.len() as f64
    }

    /// Derivative with respect to each margin.
    pub fn margin_gradient(&self, u: &[f64]) -> Vec<f64> {
        let s = &self.surrogate;
        let n = u.len() as f64;
        u.iter()
            .zip(self.p.iter().zip(&self.q))
            .map(|(&u, (&p, &q))| (p * s.s1_prime(u) + q * s.s2_prime(u)) / n)
            .collect()
    }

    pub fn margin_curvature(&self, u: &[f64]) -> Vec<f64> {
        let s = &self.surrogate;
        let n = u.len() as f64;
        u.iter()
            .zip(self.p.iter().zip(&self.q))
            .map(|(&u, (&p, &q))| (p * s.s1_second(u) + q * s.s2_second(u)) / n)
            .collect()
    }

    pub fn value_at(&self, model: &DecisionFunction, data: &TrialDataset) -> f64 {
        let design = Design::for_model(model, data);
        self.value(&design.margins(&theta_of(model)))
    }

    /// Gradient with respect to `(weights, intercept)`.
    pub fn gradient_at(&self, model: &DecisionFunction, data: &TrialDataset) -> Vec<f64> {
        let design = Design::for_model(model, data);
        design.pullback(&self.margin_gradient(&design.margins(&theta_of(model))))
    }
}

/// The convex pair `(F_j, H_j)` with `G_j = F_j − H_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSplit {
    pub knot: usize,
    pub f: MarginFunctional,
    pub h: MarginFunctional,
}

pub fn split_fh(coefficients: &KnotCoefficients, j: usize, surrogate: SurrogateParams) -> Result<KnotSplit, DcaError> {
    let n = coefficients.len();
    if j >= n {
        return Err(DcaError::KnotIndex { index: j, n });
    }
    let col = coefficients.column(j);
    let pos: Vec<f64> = col.iter().map(|c| c.max(0.0)).collect();
    let neg: Vec<f64> = col.iter().map(|c| (-c).max(0.0)).collect();
    Ok(KnotSplit {
        knot: j,
        f: MarginFunctional {
            p: pos.clone(),
            q: neg.clone(),
            surrogate,
        },
        h: MarginFunctional {
            p: neg,
            q: pos,
            surrogate,
        },
    })
}

/// The common convex part `F` of the chosen decomposition (the envelope
/// stands in for the knotwise scheme, which has no single `F`).
pub fn common_part(coefficients: &KnotCoefficients, decomposition: Decomposition, surrogate: SurrogateParams) -> MarginFunctional {
    let n = coefficients.len();
    let (p, q) = match decomposition {
        Decomposition::SumOfKnots => (0..n).map(|i| coefficients.row_sign_sums(i)).unzip(),
        Decomposition::Envelope | Decomposition::Knotwise => (0..n)
            .map(|i| {
                let (lo, hi) = coefficients.row_range(i);
                (hi.max(0.0), (-lo).max(0.0))
            })
            .unzip(),
    };
    MarginFunctional { p, q, surrogate }
}

/// Indices `j` with `h_j ≥ max_k h_k − ε`.
pub fn epsilon_argmax(h: &[f64], epsilon: f64) -> Vec<usize> {
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    h.iter()
        .enumerate()
        .filter(|(_, &v)| v >= max - epsilon)
        .map(|(j, _)| j)
        .collect()
}

fn theta_of(model: &DecisionFunction) -> Vec<f64> {
    let mut t = model.weights.clone();
    t.push(model.intercept);
    t
}

/// Feature matrix `Φ` (raw covariates or kernel evaluations against the
/// anchors) together with the signed actions.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    n: usize,
    m: usize,
    phi: Vec<f64>,
    sign: Vec<f64>,
}

impl Design {
    pub(crate) fn for_model(model: &DecisionFunction, data: &TrialDataset) -> Self {
        let n = data.len();
        let sign = data.actions().iter().map(|a| a.sign()).collect();
        match &model.form {
            ModelForm::Linear { dim } => Self {
                n,
                m: *dim,
                phi: data.covariates().to_vec(),
                sign,
            },
            ModelForm::Kernel { dim, bandwidth, anchors } => {
                let m = anchors.len() / dim;
                let mut phi = Vec::with_capacity(n * m);
                for i in 0..n {
                    let x = data.x(i);
                    phi.extend(anchors.chunks(*dim).map(|a| gaussian_kernel(x, a, *bandwidth)));
                }
                Self { n, m, phi, sign }
            }
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.m..(i + 1) * self.m]
    }

    pub(crate) fn margins(&self, theta: &[f64]) -> Vec<f64> {
        let (w, b) = theta.split_at(self.m);
        (0..self.n)
            .map(|i| self.sign[i] * (self.row(i).iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b[0]))
            .collect()
    }

    /// `Σ_i g_i A_i (Φ_i, 1)`: chain rule from margins to parameters.
    pub(crate) fn pullback(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m + 1];
        for i in 0..self.n {
            let gi = g[i] * self.sign[i];
            if gi == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += gi * x;
            }
            out[self.m] += gi;
        }
        out
    }

    /// `Σ_i d_i (Φ_i, 1)(Φ_i, 1)ᵀ` (the signs square away).
    fn curvature(&self, d: &[f64]) -> DMatrix<f64> {
        let m1 = self.m + 1;
        let mut h = DMatrix::zeros(m1, m1);
        let mut z = vec![0.0; m1];
        for i in 0..self.n {
            if d[i] == 0.0 {
                continue;
            }
            z[..self.m].copy_from_slice(self.row(i));
            z[self.m] = 1.0;
            for r in 0..m1 {
                let zr = d[i] * z[r];
                for c in 0..=r {
                    h[(r, c)] += zr * z[c];
                }
            }
        }
        for r in 0..m1 {
            for c in 0..r {
                h[(c, r)] = h[(r, c)];
            }
        }
        h
    }
}

/// Penalty on the weight block of `θ = (w, b)`.
#[derive(Debug, Clone)]
pub(crate) struct PenaltyTerm {
    kind: Penalty,
    lambda: f64,
    m: usize,
    gram: Option<Vec<f64>>,
}

impl PenaltyTerm {
    pub(crate) fn for_model(model: &DecisionFunction) -> Self {
        let gram = match (&model.form, model.penalty) {
            (ModelForm::Kernel { dim, bandwidth, anchors }, Penalty::RkhsNorm) => Some(gram_matrix(anchors, *dim, *bandwidth)),
            _ => None,
        };
        Self {
            kind: model.penalty,
            lambda: model.lambda,
            m: model.weights.len(),
            gram,
        }
    }

    fn gram_times(&self, w: &[f64]) -> Vec<f64> {
        match &self.gram {
            Some(k) => (0..self.m).map(|i| k[i * self.m..(i + 1) * self.m].iter().zip(w).map(|(a, b)| a * b).sum()).collect(),
            None => w.to_vec(),
        }
    }

    pub(crate) fn value(&self, theta: &[f64]) -> f64 {
        let w = &theta[..self.m];
        match self.kind {
            Penalty::L1 => self.lambda * w.iter().map(|v| v.abs()).sum::<f64>(),
            Penalty::L2 | Penalty::RkhsNorm => {
                0.5 * self.lambda * w.iter().zip(self.gram_times(w)).map(|(a, b)| a * b).sum::<f64>()
            }
        }
    }

    fn add_gradient(&self, theta: &[f64], g: &mut [f64]) {
        if self.kind == Penalty::L1 {
            return;
        }
        for (gi, v) in g.iter_mut().zip(self.gram_times(&theta[..self.m])) {
            *gi += self.lambda * v;
        }
    }

    fn add_hessian(&self, h: &mut DMatrix<f64>) {
        match (&self.gram, self.kind) {
            (_, Penalty::L1) => {}
            (Some(k), _) => {
                for r in 0..self.m {
                    for c in 0..self.m {
                        h[(r, c)] += self.lambda * k[r * self.m + c];
                    }
                }
            }
            (None, _) => {
                for r in 0..self.m {
                    h[(r, r)] += self.lambda;
                }
            }
        }
    }
}

/// Outcome of one convex inner solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerReport {
    pub iterations: usize,
    /// Gradient norm (smooth penalties) or subgradient optimality residual
    /// (L1), relative to the size of the linear term.
    pub residual: f64,
}

/// `Q(θ) = F(θ) − ⟨g, θ⟩ + pen(θ)`.
pub(crate) struct Subproblem<'a> {
    pub(crate) design: &'a Design,
    pub(crate) f: &'a MarginFunctional,
    pub(crate) linear: Vec<f64>,
    pub(crate) penalty: &'a PenaltyTerm,
}

impl Subproblem<'_> {
    pub(crate) fn value(&self, theta: &[f64]) -> f64 {
        self.f.value(&self.design.margins(theta)) - dot(&self.linear, theta) + self.penalty.value(theta)
    }

    fn smooth_gradient(&self, theta: &[f64], u: &[f64]) -> Vec<f64> {
        let mut g = self.design.pullback(&self.f.margin_gradient(u));
        for (gi, l) in g.iter_mut().zip(&self.linear) {
            *gi -= l;
        }
        self.penalty.add_gradient(theta, &mut g);
        g
    }

    fn scale(&self) -> f64 {
        self.linear.iter().fold(1.0f64, |a, v| a.max(v.abs()))
    }

    pub(crate) fn solve(&self, start: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, InnerReport) {
        match self.penalty.kind {
            Penalty::L1 => self.solve_proximal(start, tol, max_iter),
            _ => self.solve_newton(start, tol, max_iter),
        }
    }

    /// Damped Newton with Armijo backtracking, falling back to steepest
    /// descent when the curvature model is not usable.
    fn solve_newton(&self, start: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, InnerReport) {
        let scale = self.scale();
        let mut theta = start.to_vec();
        let mut q = self.value(&theta);
        let mut residual = f64::INFINITY;
        let mut it = 0;
        while it < max_iter {
            let u = self.design.margins(&theta);
            let g = self.smooth_gradient(&theta, &u);
            residual = norm_inf(&g) / scale;
            if residual <= tol {
                break;
            }
            it += 1;
            let mut h = self.design.curvature(&self.f.margin_curvature(&u));
            self.penalty.add_hessian(&mut h);
            let ridge = 1e-10 * (1.0 + (0..h.nrows()).map(|k| h[(k, k)]).fold(0.0, f64::max));
            for k in 0..h.nrows() {
                h[(k, k)] += ridge;
            }
            let gv = DVector::from_column_slice(&g);
            let mut dir: Vec<f64> = match h.cholesky() {
                Some(ch) => (-ch.solve(&gv)).iter().copied().collect(),
                None => g.iter().map(|v| -v).collect(),
            };
            let mut slope = dot(&dir, &g);
            if !(slope < 0.0) || dir.iter().any(|v| !v.is_finite()) {
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-30 {
                let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                let qc = self.value(&cand);
                if qc <= q + 1e-4 * t * slope {
                    theta = cand;
                    q = qc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (theta, InnerReport { iterations: it, residual })
    }

    /// Proximal Newton: each step minimizes the local quadratic model plus
    /// the L1 term by coordinate descent, then backtracks on `Q`.
    fn solve_proximal(&self, start: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, InnerReport) {
        let m = self.penalty.m;
        let lambda = self.penalty.lambda;
        let scale = self.scale();
        let l1 = |t: &[f64]| lambda * t[..m].iter().map(|v| v.abs()).sum::<f64>();
        let mut theta = start.to_vec();
        let mut q = self.value(&theta);
        let mut residual = f64::INFINITY;
        let mut it = 0;
        while it < max_iter {
            let u = self.design.margins(&theta);
            let g = self.smooth_gradient(&theta, &u);
            residual = l1_optimality(&theta, &g, lambda, m) / scale;
            if residual <= tol {
                break;
            }
            it += 1;
            let mut h = self.design.curvature(&self.f.margin_curvature(&u));
            let ridge = 1e-10 * (1.0 + (0..h.nrows()).map(|k| h[(k, k)]).fold(0.0, f64::max));
            for k in 0..h.nrows() {
                h[(k, k)] += ridge;
            }
            let d = lasso_model_step(&h, &g, &theta, lambda, m);
            let decrease = dot(&g, &d) + l1(&theta.iter().zip(&d).map(|(a, b)| a + b).collect::<Vec<_>>()) - l1(&theta);
            let mut t = 1.0;
            let mut accepted = false;
            if decrease < 0.0 {
                while t > 1e-20 {
                    let cand: Vec<f64> = theta.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                    let qc = self.value(&cand);
                    if qc <= q + 1e-4 * t * decrease {
                        theta = cand;
                        q = qc;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if !accepted {
                // fall back to a backtracked proximal-gradient step
                let mut lip = 1.0;
                let mut moved = false;
                while lip < 1e30 {
                    let cand: Vec<f64> = theta
                        .iter()
                        .zip(&g)
                        .enumerate()
                        .map(|(k, (a, gk))| {
                            let v = a - gk / lip;
                            if k < m {
                                soft_threshold(v, lambda / lip)
                            } else {
                                v
                            }
                        })
                        .collect();
                    let qc = self.value(&cand);
                    if qc < q {
                        theta = cand;
                        q = qc;
                        moved = true;
                        break;
                    }
                    lip *= 4.0;
                }
                if !moved {
                    break;
                }
            }
        }
        (theta, InnerReport { iterations: it, residual })
    }
}

/// Subgradient optimality residual of `smooth + λ‖w‖₁` (intercept free).
fn l1_optimality(theta: &[f64], g: &[f64], lambda: f64, m: usize) -> f64 {
    g.iter()
        .zip(theta)
        .enumerate()
        .map(|(k, (&gk, &t))| {
            if k >= m {
                gk.abs()
            } else if t != 0.0 {
                (gk + lambda * t.signum()).abs()
            } else {
                (gk.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `gᵀd + ½ dᵀHd + λ‖w + d_w‖₁` over `d` by cyclic coordinate
/// descent.
fn lasso_model_step(h: &DMatrix<f64>, g: &[f64], theta: &[f64], lambda: f64, m: usize) -> Vec<f64> {
    let k = g.len();
    let mut d = vec![0.0; k];
    // hd = H d, kept up to date
    let mut hd = vec![0.0; k];
    for _ in 0..200 {
        let mut max_move = 0.0f64;
        for c in 0..k {
            let hcc = h[(c, c)];
            if hcc <= 0.0 {
                continue;
            }
            // gradient of the model in coordinate c, excluding the diagonal term
            let partial = g[c] + hd[c] - hcc * d[c];
            let new = if c < m {
                // minimize ½ hcc x² + partial x + λ|θ_c + x|
                let z = theta[c] - partial / hcc;
                soft_threshold(z, lambda / hcc) - theta[c]
            } else {
                -partial / hcc
            };
            let delta = new - d[c];
            if delta != 0.0 {
                for r in 0..k {
                    hd[r] += h[(r, c)] * delta;
                }
                d[c] = new;
                max_move = max_move.max(delta.abs() * hcc.sqrt());
            }
        }
        if max_move <= 1e-13 {
            break;
        }
    }
    d
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Model family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FormSpec {
    Linear,
    Kernel { bandwidth: f64 },
}

/// Starting point `f^(0)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Init {
    #[default]
    Zero,
    /// Contrast of an l1-penalized least-squares fit (linear form only).
    Pls { lambda: f64 },
    Model(DecisionFunction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcaConfig {
    pub target: Target,
    pub gamma: f64,
    pub lambda: f64,
    pub penalty: Penalty,
    pub form: FormSpec,
    pub surrogate: SurrogateParams,
    /// ε-argmax slack; `None` means `1e−6 (1 + |G̃(f^(0))|)`.
    pub epsilon: Option<f64>,
    pub kappa: f64,
    pub max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub decomposition: Decomposition,
    pub init: Init,
}

impl Default for DcaConfig {
    fn default() -> Self {
        Self {
            target: Target::M0,
            gamma: crate::criteria::DEFAULT_GAMMA,
            lambda: 0.1,
            penalty: Penalty::L2,
            form: FormSpec::Linear,
            surrogate: SurrogateParams::default(),
            epsilon: None,
            kappa: 1e-6,
            max_iter: 200,
            inner_tol: 1e-8,
            inner_max_iter: 500,
            decomposition: Decomposition::default(),
            init: Init::Zero,
        }
    }
}

impl DcaConfig {
    pub fn validate(&self) -> Result<(), DcaError> {
        check_gamma(self.gamma)?;
        let bad = |msg: &str| Err(DcaError::Config(msg.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a nonnegative finite number");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if matches!(self.epsilon, Some(e) if !(e > 0.0)) {
            return bad("epsilon must be positive");
        }
        if !(self.surrogate.delta > 0.0) {
            return bad("surrogate delta must be positive");
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iter == 0 {
            return bad("inner tolerance and iteration cap must be positive");
        }
        match (self.form, self.penalty) {
            (FormSpec::Linear, Penalty::RkhsNorm) => bad("the RKHS-norm penalty needs the kernel form"),
            (FormSpec::Kernel { bandwidth }, _) if !(bandwidth > 0.0) => bad("kernel bandwidth must be positive"),
            (FormSpec::Kernel { .. }, _) if matches!(self.init, Init::Pls { .. }) => {
                bad("the least-squares warm start is only available for the linear form")
            }
            _ => Ok(()),
        }
    }
}

/// One outer DCA iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub active_knot: Option<usize>,
    pub objective: f64,
    pub inner_iterations: usize,
    pub inner_residual: f64,
    /// The drawn knot failed to descend and the exact argmin knot was used.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcaState {
    pub model: DecisionFunction,
    pub active_knot: Option<usize>,
    pub trace: Vec<TraceRecord>,
    pub epsilon: f64,
    pub kappa: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Every knot coefficient is zero, so the objective ignores `f`.
    pub degenerate: bool,
}

impl DcaState {
    pub fn objective_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.objective).collect()
    }

    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.objective)
    }
}

fn surrogate_values(u: &[f64], s: &SurrogateParams) -> Vec<f64> {
    u.iter().map(|&v| s.s(v)).collect()
}

fn surrogate_slopes(u: &[f64], s: &SurrogateParams) -> Vec<f64> {
    u.iter().map(|&v| s.s_prime(v)).collect()
}

fn check_model(model: &DecisionFunction, data: &TrialDataset) -> Result<(), DcaError> {
    model.validate()?;
    if model.dim() != data.dim() {
        return Err(ModelError::Dimension {
            expected: model.dim(),
            found: data.dim(),
        }
        .into());
    }
    Ok(())
}

fn g1_with(model: &DecisionFunction, alpha: f64, data: &TrialDataset, gamma: f64, surrogate: SurrogateParams, target: Target) -> Result<f64, DcaError> {
    check_gamma(gamma)?;
    check_model(model, data)?;
    let design = Design::for_model(model, data);
    let u = design.margins(&theta_of(model));
    let sum: f64 = (0..data.len())
        .map(|i| {
            let r = data.outcomes()[i];
            let cvar = alpha - (alpha - r).max(0.0) / gamma;
            let weight = match target {
                Target::M0 => -cvar,
                Target::M1 => -0.5 * r - 0.5 * cvar,
            };
            surrogate.s(u[i]) / data.propensities()[i] * weight
        })
        .sum();
    Ok(sum / data.len() as f64 + model.penalty_value())
}

/// `(1/n) Σ_i S(A_i f(X_i)) / π_i · (−(α − (α − R_i)_+ / γ)) + pen(f)`.
pub fn objective_g1(model: &DecisionFunction, alpha: f64, data: &TrialDataset, gamma: f64, surrogate: SurrogateParams) -> Result<f64, DcaError> {
    g1_with(model, alpha, data, gamma, surrogate, Target::M0)
}

/// The mixed-criterion analogue of [`objective_g1`], with per-record weight
/// `−0.5 R_i − 0.5 (α − (α − R_i)_+ / γ)`.
pub fn objective_g1_m1(model: &DecisionFunction, alpha: f64, data: &TrialDataset, gamma: f64, surrogate: SurrogateParams) -> Result<f64, DcaError> {
    g1_with(model, alpha, data, gamma, surrogate, Target::M1)
}

/// `G_j(f)` (penalty excluded) for the knot `α = R_j`.
pub fn objective_gj(model: &DecisionFunction, j: usize, data: &TrialDataset, gamma: f64, surrogate: SurrogateParams) -> Result<f64, DcaError> {
    let coefficients = KnotCoefficients::new(data, gamma, Target::M0)?;
    if j >= data.len() {
        return Err(DcaError::KnotIndex { index: j, n: data.len() });
    }
    check_model(model, data)?;
    let design = Design::for_model(model, data);
    let s = surrogate_values(&design.margins(&theta_of(model)), &surrogate);
    Ok(coefficients.knot_value(&s, j))
}

/// `G_j(f)` for every knot.
pub fn all_knot_objectives(model: &DecisionFunction, data: &TrialDataset, coefficients: &KnotCoefficients, surrogate: SurrogateParams) -> Vec<f64> {
    let design = Design::for_model(model, data);
    coefficients.knot_values(&surrogate_values(&design.margins(&theta_of(model)), &surrogate))
}

/// `G̃ = min_j G_j + pen` and the equivalent `F − max_j (F − G_j) + pen`.
pub fn tilde_objective_forms(model: &DecisionFunction, data: &TrialDataset, coefficients: &KnotCoefficients, common: &MarginFunctional) -> (f64, f64) {
    let design = Design::for_model(model, data);
    let u = design.margins(&theta_of(model));
    let g = coefficients.knot_values(&surrogate_values(&u, &common.surrogate));
    let f = common.value(&u);
    let pen = model.penalty_value();
    let min_g = g.iter().copied().fold(f64::INFINITY, f64::min);
    let max_h = g.iter().map(|gj| f - gj).fold(f64::NEG_INFINITY, f64::max);
    (min_g + pen, f - max_h + pen)
}

fn initial_model(data: &TrialDataset, config: &DcaConfig) -> Result<DecisionFunction, DcaError> {
    let mut model = match (&config.init, config.form) {
        (Init::Model(m), _) => {
            let mut m = m.clone();
            m.penalty = config.penalty;
            m.lambda = config.lambda;
            m
        }
        (_, FormSpec::Linear) => DecisionFunction::zeros_linear(data.dim(), config.penalty, config.lambda),
        (_, FormSpec::Kernel { bandwidth }) => DecisionFunction::zeros_kernel(data, bandwidth, config.penalty, config.lambda),
    };
    if let Init::Pls { lambda } = config.init {
        let pls = crate::pls::pls_fit(data, lambda, &crate::pls::PlsOptions::default())
            .map_err(|e| DcaError::Config(format!("warm start failed: {e}")))?;
        let (w, b) = pls.contrast();
        model.weights = w;
        model.intercept = b;
    }
    model.scaling = data.scaling().cloned();
    check_model(&model, data)?;
    Ok(model)
}

fn fit_with_target<R: Rng + ?Sized>(data: &TrialDataset, config: &DcaConfig, target: Target, rng: &mut R) -> Result<(DecisionFunction, DcaState), DcaError> {
    config.validate()?;
    if data.is_empty() {
        return Err(DcaError::Empty);
    }
    let coefficients = KnotCoefficients::new(data, config.gamma, target)?;
    let mut model = initial_model(data, config)?;
    let design = Design::for_model(&model, data);
    let penalty = PenaltyTerm::for_model(&model);
    let common = common_part(&coefficients, config.decomposition, config.surrogate);
    let degenerate = (0..data.len()).all(|i| {
        let (lo, hi) = coefficients.row_range(i);
        lo == 0.0 && hi == 0.0
    });

    let mut theta = theta_of(&model);
    let evaluate = |theta: &[f64]| {
        let u = design.margins(theta);
        let g = coefficients.knot_values(&surrogate_values(&u, &config.surrogate));
        let min = g.iter().copied().fold(f64::INFINITY, f64::min);
        (u, g, min + penalty.value(theta))
    };
    let (mut u, mut g, mut tilde) = evaluate(&theta);
    let epsilon = config.epsilon.unwrap_or(1e-6 * (1.0 + tilde.abs()));
    let mut trace = vec![TraceRecord {
        iteration: 0,
        active_knot: None,
        objective: tilde,
        inner_iterations: 0,
        inner_residual: 0.0,
        fallback: false,
    }];
    let mut converged = false;
    let mut active = None;
    let n = data.len() as f64;

    if !degenerate {
        for v in 1..=config.max_iter {
            // ε-argmax of h_j = F − G_j is the ε-argmin of G_j
            let min_g = g.iter().copied().fold(f64::INFINITY, f64::min);
            let candidates: Vec<usize> = (0..g.len()).filter(|&j| g[j] <= min_g + epsilon).collect();
            let drawn = candidates[rng.gen_range(0..candidates.len())];
            let exact = candidates.iter().copied().find(|&j| g[j] == min_g).unwrap_or(drawn);

            let slopes = surrogate_slopes(&u, &config.surrogate);
            let step = |j: usize| {
                let own;
                let f = if config.decomposition == Decomposition::Knotwise {
                    own = split_fh(&coefficients, j, config.surrogate).expect("knot index in range").f;
                    &own
                } else {
                    &common
                };
                let grad_f = design.pullback(&f.margin_gradient(&u));
                let col = coefficients.column(j);
                let dg: Vec<f64> = slopes.iter().zip(&col).map(|(s, c)| s * c / n).collect();
                let grad_g = design.pullback(&dg);
                let sub = Subproblem {
                    design: &design,
                    f,
                    linear: grad_f.iter().zip(&grad_g).map(|(a, b)| a - b).collect(),
                    penalty: &penalty,
                };
                let (next, report) = sub.solve(&theta, config.inner_tol, config.inner_max_iter);
                let (u2, g2, t2) = evaluate(&next);
                (next, report, u2, g2, t2)
            };
            let mut j = drawn;
            let mut out = step(j);
            let mut fallback = false;
            if out.4 > tilde + 1e-12 * (1.0 + tilde.abs()) && drawn != exact {
                j = exact;
                out = step(j);
                fallback = true;
            }
            let (next, report, u2, g2, t2) = out;
            let change = (tilde - t2).abs();
            trace.push(TraceRecord {
                iteration: v,
                active_knot: Some(j),
                objective: t2,
                inner_iterations: report.iterations,
                inner_residual: report.residual,
                fallback,
            });
            active = Some(j);
            if t2 <= tilde {
                theta = next;
                u = u2;
                g = g2;
                tilde = t2;
            }
            if change < config.kappa {
                converged = true;
                break;
            }
        }
    } else {
        converged = true;
    }

    let m = model.weights.len();
    model.weights = theta[..m].to_vec();
    model.intercept = theta[m];
    let iterations = trace.len() - 1;
    Ok((
        model.clone(),
        DcaState {
            model,
            active_knot: active,
            trace,
            epsilon,
            kappa: config.kappa,
            iterations,
            converged,
            degenerate,
        },
    ))
}

/// Enhanced probabilistic DCA for the decision-rule CVaR surrogate.
///
/// Returns the best iterate; hitting `max_iter` is reported through
/// `converged = false` rather than an error.
pub fn dca_fit<R: Rng + ?Sized>(data: &TrialDataset, config: &DcaConfig, rng: &mut R) -> Result<(DecisionFunction, DcaState), DcaError> {
    fit_with_target(data, config, config.target, rng)
}

/// [`dca_fit`] for the mixed criterion `0.5 V + 0.5 M0`.
pub fn dca_fit_m1<R: Rng + ?Sized>(data: &TrialDataset, config: &DcaConfig, rng: &mut R) -> Result<(DecisionFunction, DcaState), DcaError> {
    fit_with_target(data, config, Target::M1, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{evaluate_m0, RulePredictions};
    use crate::data::{Action, RandomSource};
    use crate::model::Rule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, p: usize, seed: u64) -> TrialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<Action> = (0..n).map(|_| if rng.gen_bool(0.5) { Action::Plus } else { Action::Minus }).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
        TrialDataset::new(p, x, a, r, pi, 0.01).unwrap()
    }

    fn random_linear(p: usize, rng: &mut ChaCha8Rng) -> DecisionFunction {
        let mut m = DecisionFunction::zeros_linear(p, Penalty::L2, 0.3);
        m.weights = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        m.intercept = rng.gen_range(-1.0..1.0);
        m
    }

    #[test]
    fn single_record_g1() {
        let data = TrialDataset::new(1, vec![1.0], vec![Action::Plus], vec![2.0], vec![0.5], 0.01).unwrap();
        let mut m = DecisionFunction::zeros_linear(1, Penalty::L2, 0.0);
        m.weights = vec![1.0];
        let v = objective_g1(&m, 2.0, &data, 0.5, SurrogateParams::default()).unwrap();
        assert!((v + 8.0).abs() < 1e-12);
    }

    #[test]
    fn dead_zone_leaves_only_the_penalty() {
        let data = TrialDataset::new(2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], vec![Action::Plus; 3], vec![1.0, -2.0, 5.0], vec![0.5; 3], 0.01).unwrap();
        let mut m = DecisionFunction::zeros_linear(2, Penalty::L2, 0.5);
        m.weights = vec![1.0, -1.0];
        m.intercept = -10.0;
        let v = objective_g1(&m, 1.0, &data, 0.5, SurrogateParams::default()).unwrap();
        assert_eq!(v, m.penalty_value());
        for j in 0..3 {
            assert_eq!(objective_gj(&m, j, &data, 0.5, SurrogateParams::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn coefficient_diagonal_and_m1_diagonal() {
        let data = random_data(6, 1, 9);
        let c0 = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
        let c1 = KnotCoefficients::new(&data, 0.5, Target::M1).unwrap();
        for i in 0..6 {
            let expect = -data.outcomes()[i] / data.propensities()[i];
            assert!((c0.get(i, i) - expect).abs() < 1e-15);
            assert!((c1.get(i, i) - expect).abs() < 1e-15);
        }
        let mat = c0.matrix().unwrap();
        assert_eq!(mat[2 * 6 + 4], c0.get(2, 4));
    }

    #[test]
    fn gj_matches_g1_at_each_knot() {
        let data = random_data(8, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SurrogateParams { delta: 0.8 };
        for _ in 0..5 {
            let m = random_linear(2, &mut rng);
            for j in 0..8 {
                let gj = objective_gj(&m, j, &data, 0.4, s).unwrap();
                let g1 = objective_g1(&m, data.outcomes()[j], &data, 0.4, s).unwrap() - m.penalty_value();
                assert!((gj - g1).abs() < 1e-12, "{gj} vs {g1}");
            }
        }
        assert!(matches!(
            objective_gj(&random_linear(2, &mut rng), 8, &data, 0.4, s),
            Err(DcaError::KnotIndex { index: 8, n: 8 })
        ));
    }

    #[test]
    fn fast_knot_values_match_direct_sums() {
        let mut data = random_data(40, 1, 5);
        // force ties among outcomes
        let mut r = data.outcomes().to_vec();
        r[3] = r[7];
        r[9] = r[7];
        data = data.with_outcomes(r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..2.0)).collect();
        for target in [Target::M0, Target::M1] {
            let c = KnotCoefficients::new(&data, 0.3, target).unwrap();
            let fast = c.knot_values(&v);
            for j in 0..40 {
                assert!((fast[j] - c.knot_value(&v, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_range_matches_enumeration() {
        let data = random_data(30, 1, 6);
        for (target, gamma) in [(Target::M0, 0.5), (Target::M0, 1.0), (Target::M1, 0.25)] {
            let c = KnotCoefficients::new(&data, gamma, target).unwrap();
            for i in 0..30 {
                let col: Vec<f64> = (0..30).map(|j| c.get(i, j)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (rlo, rhi) = c.row_range(i);
                assert!((rlo - lo).abs() <= 1e-12 * (1.0 + lo.abs()) && rlo <= lo + 1e-12);
                assert!((rhi - hi).abs() <= 1e-12 * (1.0 + hi.abs()));
            }
        }
    }

    #[test]
    fn split_identity_and_gradients() {
        let data = random_data(12, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = SurrogateParams::default();
        for target in [Target::M0, Target::M1] {
            let c = KnotCoefficients::new(&data, 0.5, target).unwrap();
            for _ in 0..20 {
                let m = random_linear(3, &mut rng);
                let j = rng.gen_range(0..12);
                let split = split_fh(&c, j, s).unwrap();
                let gj = all_knot_objectives(&m, &data, &c, s)[j];
                let diff = split.f.value_at(&m, &data) - split.h.value_at(&m, &data);
                assert!((diff - gj).abs() <= 1e-10);
            }
        }
        // finite differences of F_j with respect to every parameter
        let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
        let split = split_fh(&c, 5, s).unwrap();
        let m = random_linear(3, &mut rng);
        let grad = split.f.gradient_at(&m, &data);
        let h = 1e-6;
        for k in 0..4 {
            let mut up = m.clone();
            let mut dn = m.clone();
            if k < 3 {
                up.weights[k] += h;
                dn.weights[k] -= h;
            } else {
                up.intercept += h;
                dn.intercept -= h;
            }
            let fd = (split.f.value_at(&up, &data) - split.f.value_at(&dn, &data)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5, "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn nonnegative_coefficients_put_only_s2_in_h() {
        // all outcomes negative ⇒ c_ij = (−R_j + …)/π_i ≥ 0 whenever R_j ≤ 0
        let data = TrialDataset::new(1, vec![0.0, 1.0, 2.0], vec![Action::Plus; 3], vec![-1.0, -2.0, -3.0], vec![0.5; 3], 0.01).unwrap();
        let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
        let split = split_fh(&c, 0, SurrogateParams::default()).unwrap();
        assert!(split.h.p.iter().all(|&v| v == 0.0));
        assert!(split.h.q.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn epsilon_argmax_cases() {
        let h = [1.0, 3.0, 2.5, 3.0];
        assert_eq!(epsilon_argmax(&h, f64::INFINITY), vec![0, 1, 2, 3]);
        assert_eq!(epsilon_argmax(&h, 1e-9), vec![1, 3]);
        assert_eq!(epsilon_argmax(&[0.0, 2.0, 1.0], 0.5), vec![1]);
    }

    #[test]
    fn tilde_forms_agree() {
        let data = random_data(15, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for decomposition in [Decomposition::SumOfKnots, Decomposition::Envelope] {
            let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
            let common = common_part(&c, decomposition, SurrogateParams::default());
            for _ in 0..10 {
                let m = random_linear(2, &mut rng);
                let (a, b) = tilde_objective_forms(&m, &data, &c, &common);
                assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn common_part_minus_each_knot_is_convex() {
        // F − G_j has nonnegative S1 and S2 coefficients for every j
        let data = random_data(20, 1, 12);
        for decomposition in [Decomposition::SumOfKnots, Decomposition::Envelope] {
            let c = KnotCoefficients::new(&data, 0.5, Target::M1).unwrap();
            let common = common_part(&c, decomposition, SurrogateParams::default());
            for j in 0..20 {
                for i in 0..20 {
                    let cij = c.get(i, j);
                    assert!(common.p[i] - cij >= -1e-12);
                    assert!(common.q[i] + cij >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn trace_descends_and_is_reproducible() {
        let data = random_data(60, 3, 17);
        for decomposition in [Decomposition::Knotwise, Decomposition::Envelope, Decomposition::SumOfKnots] {
            for penalty in [Penalty::L2, Penalty::L1] {
                let config = DcaConfig {
                    penalty,
                    lambda: 0.05,
                    decomposition,
                    max_iter: 60,
                    ..DcaConfig::default()
                };
                let (m1, s1) = dca_fit(&data, &config, &mut RandomSource::new(5).rng()).unwrap();
                let (m2, s2) = dca_fit(&data, &config, &mut RandomSource::new(5).rng()).unwrap();
                assert_eq!(m1, m2);
                let t1 = s1.objective_trace();
                assert_eq!(t1, s2.objective_trace());
                for w in t1.windows(2) {
                    assert!(w[1] <= w[0] + config.inner_tol, "{decomposition:?} {penalty:?}: {t1:?}");
                }
            }
        }
    }

    #[test]
    fn separable_toy_recovers_the_optimal_signs() {
        // x = +1 prefers A = +1 (R gap 2), x = −1 prefers A = −1
        let mut x = vec![];
        let mut a = vec![];
        let mut r = vec![];
        for k in 0..40 {
            let xi: f64 = if k % 2 == 0 { 1.0 } else { -1.0 };
            let ai = if (k / 2) % 2 == 0 { Action::Plus } else { Action::Minus };
            x.push(xi);
            a.push(ai);
            r.push(if xi * ai.sign() > 0.0 { 3.0 } else { 1.0 });
        }
        let data = TrialDataset::new(1, x, a, r, vec![0.5; 40], 0.01).unwrap();
        let config = DcaConfig {
            lambda: 0.01,
            ..DcaConfig::default()
        };
        let (m, _) = dca_fit(&data, &config, &mut RandomSource::new(1).rng()).unwrap();
        assert_eq!(m.decide_x(&[1.0]), Action::Plus);
        assert_eq!(m.decide_x(&[-1.0]), Action::Minus);
    }

    #[test]
    fn heavy_penalty_collapses_to_intercept() {
        let data = random_data(50, 4, 2);
        let config = DcaConfig {
            lambda: 1e6,
            ..DcaConfig::default()
        };
        let (m, _) = dca_fit(&data, &config, &mut RandomSource::new(3).rng()).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-4), "{:?}", m.weights);
        let l1 = DcaConfig {
            lambda: 1e6,
            penalty: Penalty::L1,
            ..DcaConfig::default()
        };
        let (m, _) = dca_fit(&data, &l1, &mut RandomSource::new(3).rng()).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn kernel_fit_runs_and_descends() {
        let data = random_data(30, 2, 4);
        let config = DcaConfig {
            penalty: Penalty::RkhsNorm,
            form: FormSpec::Kernel { bandwidth: 1.0 },
            lambda: 0.1,
            ..DcaConfig::default()
        };
        let (m, s) = dca_fit(&data, &config, &mut RandomSource::new(2).rng()).unwrap();
        assert_eq!(m.weights.len(), 30);
        for w in s.objective_trace().windows(2) {
            assert!(w[1] <= w[0] + config.inner_tol);
        }
    }

    #[test]
    fn zero_outcomes_are_degenerate() {
        let data = TrialDataset::new(1, vec![0.0, 1.0], vec![Action::Plus, Action::Minus], vec![0.0, 0.0], vec![0.5; 2], 0.01).unwrap();
        let (_, s) = dca_fit(&data, &DcaConfig::default(), &mut RandomSource::new(0).rng()).unwrap();
        assert!(s.degenerate);
    }

    #[test]
    fn rejects_bad_configuration() {
        let data = random_data(5, 1, 1);
        for config in [
            DcaConfig { gamma: 0.0, ..DcaConfig::default() },
            DcaConfig { lambda: -1.0, ..DcaConfig::default() },
            DcaConfig { penalty: Penalty::RkhsNorm, ..DcaConfig::default() },
            DcaConfig { epsilon: Some(0.0), ..DcaConfig::default() },
        ] {
            assert!(dca_fit(&data, &config, &mut RandomSource::new(0).rng()).is_err());
        }
    }

    #[test]
    fn inner_solutions_are_stationary() {
        let data = random_data(40, 2, 13);
        let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
        let s = SurrogateParams::default();
        let common = common_part(&c, Decomposition::Envelope, s);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_linear(2, &mut rng);
        let design = Design::for_model(&m, &data);
        let pen = PenaltyTerm::for_model(&m);
        let theta = theta_of(&m);
        let sub = Subproblem {
            design: &design,
            f: &common,
            linear: vec![0.3, -0.2, 0.1],
            penalty: &pen,
        };
        let (_, report) = sub.solve(&theta, 1e-8, 500);
        assert!(report.residual <= 1e-8, "{report:?}");
    }

    #[test]
    fn majorant_upper_bounds_the_tilde_objective() {
        let data = random_data(25, 2, 19);
        let s = SurrogateParams::default();
        let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
        let common = common_part(&c, Decomposition::Envelope, s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_linear(2, &mut rng);
        let design = Design::for_model(&base, &data);
        let t0 = theta_of(&base);
        let u0 = design.margins(&t0);
        let j = 4;
        let col = c.column(j);
        let n = data.len() as f64;
        let dg: Vec<f64> = u0.iter().zip(&col).map(|(&u, c)| s.s_prime(u) * c / n).collect();
        let grad_h: Vec<f64> = design
            .pullback(&common.margin_gradient(&u0))
            .iter()
            .zip(design.pullback(&dg))
            .map(|(a, b)| a - b)
            .collect();
        let h0 = common.value(&u0) - c.knot_value(&surrogate_values(&u0, &s), j);
        for _ in 0..50 {
            let other = random_linear(2, &mut rng);
            let t = theta_of(&other);
            let u = design.margins(&t);
            let (tilde, _) = tilde_objective_forms(&other, &data, &c, &common);
            let lin: f64 = h0 + grad_h.iter().zip(t.iter().zip(&t0)).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
            let majorant = common.value(&u) - lin + other.penalty_value();
            assert!(majorant >= tilde - 1e-10);
        }
    }

    #[test]
    fn joint_grid_matches_knot_reduction() {
        // 1-d models f(x) = w·x + b on a grid; α on a dense grid
        for seed in 0..4 {
            let data = random_data(10, 1, 100 + seed);
            let s = SurrogateParams::default();
            let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
            let (lo, hi) = data.outcomes().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
            let mut joint = f64::INFINITY;
            let mut reduced = f64::INFINITY;
            for wi in -8..=8 {
                for bi in -8..=8 {
                    let mut m = DecisionFunction::zeros_linear(1, Penalty::L2, 0.1);
                    m.weights = vec![wi as f64 * 0.5];
                    m.intercept = bi as f64 * 0.5;
                    for k in 0..=2000 {
                        let alpha = lo - 0.5 + (hi - lo + 1.0) * k as f64 / 2000.0;
                        joint = joint.min(objective_g1(&m, alpha, &data, 0.5, s).unwrap());
                    }
                    let g = all_knot_objectives(&m, &data, &c, s);
                    reduced = reduced.min(g.iter().copied().fold(f64::INFINITY, f64::min) + m.penalty_value());
                }
            }
            // the α-grid can only miss a knot by its spacing times the slope bound
            let slope = 2.0 * data.propensities().iter().map(|p| 1.0 / p).sum::<f64>() / 0.5 / 10.0;
            let res = (hi - lo + 1.0) / 2000.0;
            assert!(joint >= reduced - 1e-12);
            assert!(joint - reduced <= slope * res, "{joint} vs {reduced}");
        }
    }

    #[test]
    fn knot_reduction_reproduces_the_m0_alpha_in_the_hard_limit() {
        // with very steep scores S ≈ 2·1{match}, G_j ≈ −2 M0(d, R_j)
        let data = TrialDataset::new(
            1,
            vec![1.0, -1.0, 1.0],
            vec![Action::Plus, Action::Minus, Action::Minus],
            vec![1.0, 2.0, 4.0],
            vec![0.5; 3],
            0.01,
        )
        .unwrap();
        let mut m = DecisionFunction::zeros_linear(1, Penalty::L2, 0.0);
        m.weights = vec![1e6];
        let c = KnotCoefficients::new(&data, 0.5, Target::M0).unwrap();
        let g = all_knot_objectives(&m, &data, &c, SurrogateParams::default());
        let j = (0..3).min_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        let d: RulePredictions = m.predict(&data);
        let m0 = evaluate_m0(&data, &d, 0.5).unwrap();
        assert_eq!(Some(data.outcomes()[j]), m0.alpha);
        assert!((g[j] + 2.0 * m0.value).abs() < 1e-9);
    }
}
