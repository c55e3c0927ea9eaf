//! K-fold cross-validation over penalty and bandwidth grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::{evaluate_m0, evaluate_m1, evaluate_value, CriterionKind};
use crate::data::{split_kfold, DataError, RandomSource, TrialDataset};
use crate::dca::{dca_fit, DcaConfig, FormSpec, Target};
use crate::model::{median_distance, Rule, RuleModel};
use crate::pls::{pls_fit, PlsOptions};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("the tuning grid is empty")]
    EmptyGrid,
    #[error("criterion {0:?} cannot be used for tuning")]
    Criterion(CriterionKind),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("fit failed: {0}")]
    Fit(String),
}

/// `2^−8, 2^−7, …, 2^4`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-8..=4).map(|k| 2f64.powi(k)).collect()
}

/// Median pairwise distance times `{0.5, 1, 2}`.
pub fn default_bandwidth_grid(data: &TrialDataset) -> Vec<f64> {
    let base = median_distance(data.covariates(), data.dim());
    vec![0.5 * base, base, 2.0 * base]
}

/// A fitting procedure with its hyperparameters fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "kebab-case")]
pub enum Learner {
    Dca(DcaConfig),
    Pls { lambda: f64, options: PlsOptions },
}

impl Learner {
    pub fn lambda(&self) -> f64 {
        match self {
            Learner::Dca(c) => c.lambda,
            Learner::Pls { lambda, .. } => *lambda,
        }
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self {
            Learner::Dca(DcaConfig {
                form: FormSpec::Kernel { bandwidth },
                ..
            }) => Some(*bandwidth),
            _ => None,
        }
    }

    pub fn fit(&self, data: &TrialDataset, source: &RandomSource) -> Result<RuleModel, TuningError> {
        match self {
            Learner::Dca(config) => dca_fit(data, config, &mut source.rng())
                .map(|(m, _)| RuleModel::Surrogate(m))
                .map_err(|e| TuningError::Fit(e.to_string())),
            Learner::Pls { lambda, options } => pls_fit(data, *lambda, options)
                .map(RuleModel::LeastSquares)
                .map_err(|e| TuningError::Fit(e.to_string())),
        }
    }
}

/// `base` with every `(λ, ς)` combination of the grids (`ς` only for kernel
/// forms).
pub fn dca_grid(base: &DcaConfig, lambdas: &[f64], bandwidths: &[f64]) -> Vec<Learner> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        match base.form {
            FormSpec::Linear => out.push(Learner::Dca(DcaConfig { lambda, ..base.clone() })),
            FormSpec::Kernel { .. } => {
                for &bandwidth in bandwidths {
                    out.push(Learner::Dca(DcaConfig {
                        lambda,
                        form: FormSpec::Kernel { bandwidth },
                        ..base.clone()
                    }))
                }
            }
        }
    }
    out
}

pub fn pls_grid(lambdas: &[f64]) -> Vec<Learner> {
    lambdas
        .iter()
        .map(|&lambda| Learner::Pls {
            lambda,
            options: PlsOptions::default(),
        })
        .collect()
}

/// Validation score of one configuration on one fold (`None` if it failed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub index: usize,
    pub lambda: f64,
    pub bandwidth: Option<f64>,
    pub fold_scores: Vec<Option<f64>>,
    /// Fold average, or `−∞` when any fold failed.
    pub mean: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best: usize,
    pub best_learner: Learner,
    pub table: Vec<CvRow>,
}

impl CvOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,lambda,bandwidth,mean,folds_failed\n");
        for r in &self.table {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.index,
                r.lambda,
                r.bandwidth.map_or(String::new(), |b| b.to_string()),
                r.mean,
                r.failures.len()
            ));
        }
        out
    }
}

fn score(kind: CriterionKind, data: &TrialDataset, rule: &RuleModel, gamma: f64) -> f64 {
    let d = rule.predict(data);
    let v = match kind {
        CriterionKind::Value => evaluate_value(data, &d),
        CriterionKind::M1 => evaluate_m1(data, &d, gamma),
        _ => evaluate_m0(data, &d, gamma),
    };
    v.map(|c| c.value).unwrap_or(f64::NEG_INFINITY)
}

/// Picks the configuration with the highest mean validation criterion.
///
/// Folds are drawn once from `source`; the fit on fold `k` uses the stream
/// `source.substream(k)`, so duplicate configurations score identically.
/// Ties go to the smaller λ, then the smaller bandwidth.
pub fn cv_select(
    data: &TrialDataset,
    grid: &[Learner],
    k: usize,
    criterion: CriterionKind,
    gamma: f64,
    source: &RandomSource,
) -> Result<CvOutcome, TuningError> {
    if grid.is_empty() {
        return Err(TuningError::EmptyGrid);
    }
    if criterion == CriterionKind::Quantile {
        return Err(TuningError::Criterion(criterion));
    }
    let folds = split_kfold(data.len(), k, &source.substream(u64::MAX))?;
    let splits: Vec<(TrialDataset, TrialDataset)> = folds.iter().map(|f| (data.subset(&f.train), data.subset(&f.validation))).collect();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let results: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (train, validation) = &splits[f];
            grid[c]
                .fit(train, &source.substream(f as u64))
                .map(|rule| score(criterion, validation, &rule, gamma))
                .map_err(|e| format!("fold {f}: {e}"))
        })
        .collect();
    let mut table = Vec::with_capacity(grid.len());
    for (c, learner) in grid.iter().enumerate() {
        let mut fold_scores = Vec::with_capacity(k);
        let mut failures = Vec::new();
        for r in &results[c * k..(c + 1) * k] {
            match r {
                Ok(s) => fold_scores.push(Some(*s)),
                Err(e) => {
                    fold_scores.push(None);
                    failures.push(e.clone());
                }
            }
        }
        let mean = if failures.is_empty() {
            fold_scores.iter().flatten().sum::<f64>() / k as f64
        } else {
            f64::NEG_INFINITY
        };
        table.push(CvRow {
            index: c,
            lambda: learner.lambda(),
            bandwidth: learner.bandwidth(),
            fold_scores,
            mean,
            failures,
        });
    }
    let best = (0..table.len())
        .reduce(|b, c| {
            let (rb, rc) = (&table[b], &table[c]);
            let better = rc.mean > rb.mean
                || (rc.mean == rb.mean
                    && (rc.lambda < rb.lambda
                        || (rc.lambda == rb.lambda && rc.bandwidth.unwrap_or(0.0) < rb.bandwidth.unwrap_or(0.0))));
            if better {
                c
            } else {
                b
            }
        })
        .unwrap();
    Ok(CvOutcome {
        best,
        best_learner: grid[best].clone(),
        table,
    })
}

/// Default criterion for a learner: the fitted target for surrogate fits and
/// the value for least squares.
pub fn default_criterion(learner: &Learner) -> CriterionKind {
    match learner {
        Learner::Dca(c) => match c.target {
            Target::M0 => CriterionKind::M0,
            Target::M1 => CriterionKind::M1,
        },
        Learner::Pls { .. } => CriterionKind::Value,
    }
}
