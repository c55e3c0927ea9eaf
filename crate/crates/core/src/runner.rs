//! Experiment configuration, replication orchestration and report files.
//!
//! Every replication `r` of scenario `s` draws from
//! `RandomSource::new(seed).substream(s.index()).substream(r)`, so adding
//! replications or methods never changes the ones already present.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alternate::{alternate_fit, AltConfig, SurrogateLinear};
use crate::criteria::{evaluate_m0, evaluate_m1, evaluate_quantile, evaluate_value, CriterionKind, RulePredictions, DEFAULT_GAMMA};
use crate::data::{load_csv, CsvSchema, DataError, RandomSource, TrialDataset};
use crate::dca::{dca_fit, DcaConfig, Decomposition, FormSpec, Target};
use crate::model::{median_distance, Penalty, Rule, RuleModel};
use crate::pls::{pls_fit, PlsOptions};
use crate::simlab::{EvaluationReport, RuleEvaluation, ScenarioId, ScenarioSpec};
use crate::surrogate::SurrogateParams;
use crate::tuning::{cv_select, dca_grid, default_lambda_grid, pls_grid, CvOutcome, Learner};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration ({}): {message}", keys.join(", "))]
    Schema { keys: Vec<String>, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunnerError {
    pub fn kind(&self) -> &'static str {
        match self {
            RunnerError::Schema { .. } => "schema",
            RunnerError::Argument(_) => "argument",
            RunnerError::Parse(_) => "parse",
            RunnerError::Data(_) => "data",
            RunnerError::Fit(_) => "fit",
            RunnerError::Io { .. } => "io",
        }
    }

    /// Machine-readable form for error reports.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        if let RunnerError::Schema { keys, .. } = self {
            v["keys"] = json!(keys);
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(key: &str, message: impl Into<String>) -> RunnerError {
    RunnerError::Schema {
        keys: vec![key.into()],
        message: message.into(),
    }
}

/// Estimation methods available to experiments and `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    L1DcCvar,
    L2DcCvar,
    GkDcCvar,
    L1DcM1,
    L2DcM1,
    GkDcM1,
    L1Pls,
    Alternating,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::L1DcCvar,
        Method::L2DcCvar,
        Method::GkDcCvar,
        Method::L1DcM1,
        Method::L2DcM1,
        Method::GkDcM1,
        Method::L1Pls,
        Method::Alternating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::L1DcCvar => "l1-dc-cvar",
            Method::L2DcCvar => "l2-dc-cvar",
            Method::GkDcCvar => "gk-dc-cvar",
            Method::L1DcM1 => "l1-dc-m1",
            Method::L2DcM1 => "l2-dc-m1",
            Method::GkDcM1 => "gk-dc-m1",
            Method::L1Pls => "l1-pls",
            Method::Alternating => "alternating",
        }
    }

    /// Stable tag for random streams.
    pub fn index(self) -> u64 {
        Method::ALL.iter().position(|&m| m == self).unwrap() as u64
    }

    /// Penalty, form and target for surrogate methods.
    fn dca_parts(self) -> Option<(Penalty, bool, Target)> {
        match self {
            Method::L1DcCvar => Some((Penalty::L1, false, Target::M0)),
            Method::L2DcCvar => Some((Penalty::L2, false, Target::M0)),
            Method::GkDcCvar => Some((Penalty::RkhsNorm, true, Target::M0)),
            Method::L1DcM1 => Some((Penalty::L1, false, Target::M1)),
            Method::L2DcM1 => Some((Penalty::L2, false, Target::M1)),
            Method::GkDcM1 => Some((Penalty::RkhsNorm, true, Target::M1)),
            Method::L1Pls | Method::Alternating => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL.into_iter().find(|m| m.name() == key).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method '{s}', expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSection {
    /// Training sample size per replication.
    pub n: usize,
    /// Covariate dimension (the toy scenario always uses 1).
    pub p: usize,
    /// Size of the fresh test population.
    pub n_test: usize,
    /// Also write each training set to `<outdir>/data/`.
    pub export_data: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n: 200,
            p: 20,
            n_test: 10_000,
            export_data: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    /// Quantile levels of the counterfactual outcome under the fitted rule.
    pub levels: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { levels: vec![0.5, 0.25] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningSection {
    /// Cross-validate λ (and the bandwidth for kernel methods).
    pub enabled: bool,
    pub folds: usize,
    pub lambdas: Vec<f64>,
    /// Bandwidth candidates as multiples of the median pairwise distance.
    pub bandwidth_multipliers: Vec<f64>,
    /// λ used when tuning is disabled.
    pub lambda: f64,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self {
            enabled: true,
            folds: 10,
            lambdas: default_lambda_grid(),
            bandwidth_multipliers: vec![0.5, 1.0, 2.0],
            lambda: 0.0625,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub max_iter: usize,
    pub kappa: f64,
    /// Knot-selection tolerance; `1e-6 (1 + |G̃0|)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub decomposition: Decomposition,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = DcaConfig::default();
        Self {
            max_iter: d.max_iter,
            kappa: d.kappa,
            epsilon: d.epsilon,
            inner_tol: d.inner_tol,
            inner_max_iter: d.inner_max_iter,
            decomposition: d.decomposition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlternatingSection {
    /// Ridge parameter of the weighted linear classifier.
    pub lambda: f64,
    pub max_alternations: usize,
    /// Chains from distinct random starting knots.
    pub restarts: usize,
}

impl Default for AlternatingSection {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            max_alternations: AltConfig::default().max_alternations,
            restarts: AltConfig::default().restarts,
        }
    }
}

/// Settings shared by every fitting entry point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub gamma: f64,
    pub delta: f64,
    pub tuning: TuningSection,
    pub solver: SolverSection,
    pub alternating: AlternatingSection,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            delta: 1.0,
            tuning: TuningSection::default(),
            solver: SolverSection::default(),
            alternating: AlternatingSection::default(),
        }
    }
}

impl MethodSettings {
    pub fn validate(&self) -> Result<(), RunnerError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(schema("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(schema("surrogate.delta", format!("must be positive, got {}", self.delta)));
        }
        let t = &self.tuning;
        if t.folds < 2 {
            return Err(schema("tuning.folds", "must be at least 2"));
        }
        if t.lambdas.is_empty() || t.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(schema("tuning.lambdas", "must be a nonempty list of positive numbers"));
        }
        if t.bandwidth_multipliers.is_empty() || t.bandwidth_multipliers.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(schema("tuning.bandwidth_multipliers", "must be a nonempty list of positive numbers"));
        }
        if !(t.lambda > 0.0 && t.lambda.is_finite()) {
            return Err(schema("tuning.lambda", "must be positive"));
        }
        let s = &self.solver;
        if s.max_iter == 0 || s.inner_max_iter == 0 {
            return Err(schema("solver.max_iter", "iteration caps must be positive"));
        }
        if !(s.kappa > 0.0) || !(s.inner_tol > 0.0) {
            return Err(schema("solver.kappa", "tolerances must be positive"));
        }
        if s.epsilon.is_some_and(|e| !(e >= 0.0)) {
            return Err(schema("solver.epsilon", "must be nonnegative"));
        }
        if !(self.alternating.lambda > 0.0) || self.alternating.max_alternations == 0 || self.alternating.restarts == 0 {
            return Err(schema("alternating.lambda", "λ, the alternation cap and the restart count must be positive"));
        }
        Ok(())
    }

    fn dca_config(&self, penalty: Penalty, target: Target, form: FormSpec, lambda: f64) -> DcaConfig {
        DcaConfig {
            target,
            gamma: self.gamma,
            lambda,
            penalty,
            form,
            surrogate: SurrogateParams::new(self.delta).expect("validated delta"),
            epsilon: self.solver.epsilon,
            kappa: self.solver.kappa,
            max_iter: self.solver.max_iter,
            inner_tol: self.solver.inner_tol,
            inner_max_iter: self.solver.inner_max_iter,
            decomposition: self.solver.decomposition,
            ..DcaConfig::default()
        }
    }
}

/// Experiment configuration, read from TOML. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed.
    pub seed: u64,
    pub reps: usize,
    /// Worker threads; 0 uses all cores.
    #[serde(skip_serializing)]
    pub jobs: usize,
    #[serde(skip_serializing)]
    pub outdir: PathBuf,
    pub scenarios: Vec<ScenarioId>,
    pub methods: Vec<Method>,
    pub gamma: f64,
    pub simulation: SimulationSection,
    pub evaluation: EvaluationSection,
    pub surrogate: SurrogateSection,
    pub tuning: TuningSection,
    pub solver: SolverSection,
    pub alternating: AlternatingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSection {
    pub delta: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_101,
            reps: 50,
            jobs: 0,
            outdir: PathBuf::from("results"),
            scenarios: vec![ScenarioId::S2],
            methods: vec![Method::L1DcCvar, Method::L1Pls],
            gamma: DEFAULT_GAMMA,
            simulation: SimulationSection::default(),
            evaluation: EvaluationSection::default(),
            surrogate: SurrogateSection::default(),
            tuning: TuningSection::default(),
            solver: SolverSection::default(),
            alternating: AlternatingSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub jobs: Option<usize>,
    pub outdir: Option<PathBuf>,
    pub scenarios: Option<Vec<ScenarioId>>,
    pub methods: Option<Vec<Method>>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub n_test: Option<usize>,
    pub export_data: Option<bool>,
}

/// Dotted paths of every key the table contains that `known` does not.
fn unknown_keys(table: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(toml::Value::Table(kt)) => {
                if let toml::Value::Table(t) = v {
                    unknown_keys(t, kt, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

fn parse_names<T: FromStr>(table: &toml::Table, key: &str) -> Result<(), RunnerError>
where
    T::Err: fmt::Display,
{
    let Some(value) = table.get(key) else { return Ok(()) };
    let items = value.as_array().ok_or_else(|| schema(key, "must be a list of names"))?;
    let mut bad = Vec::new();
    for item in items {
        match item {
            toml::Value::String(s) => {
                if let Err(e) = s.parse::<T>() {
                    bad.push(e.to_string());
                }
            }
            toml::Value::Integer(i) => {
                if let Err(e) = i.to_string().parse::<T>() {
                    bad.push(e.to_string());
                }
            }
            other => bad.push(format!("'{other}' is not a name")),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(schema(key, bad.join("; ")))
    }
}

impl ExperimentConfig {
    /// Parses TOML text; unknown keys and unknown names are schema errors.
    pub fn from_toml(text: &str) -> Result<Self, RunnerError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| RunnerError::Parse(e.to_string()))?;
        let mut known = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        known.insert("jobs".into(), toml::Value::Integer(0));
        known.insert("outdir".into(), toml::Value::String(String::new()));
        if let Some(toml::Value::Table(solver)) = known.get_mut("solver") {
            solver.insert("epsilon".into(), toml::Value::Float(0.0));
        }
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(RunnerError::Schema {
                message: format!("unknown key{}", if unknown.len() > 1 { "s" } else { "" }),
                keys: unknown,
            });
        }
        parse_names::<Method>(&table, "methods")?;
        parse_names::<ScenarioId>(&table, "scenarios")?;
        let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| RunnerError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = &o.$src { self.$($dst).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed, reps => reps, jobs => jobs, outdir => outdir,
            scenarios => scenarios, methods => methods, gamma => gamma,
            delta => surrogate.delta, n => simulation.n, p => simulation.p,
            n_test => simulation.n_test, export_data => simulation.export_data,
        );
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.reps == 0 {
            return Err(schema("reps", "must be at least 1"));
        }
        if self.scenarios.is_empty() {
            return Err(schema("scenarios", "must not be empty"));
        }
        if self.methods.is_empty() {
            return Err(schema("methods", "must not be empty"));
        }
        if self.simulation.n < 2 || self.simulation.n_test == 0 {
            return Err(schema("simulation.n", "sample sizes must be positive and n at least 2"));
        }
        if self.tuning.enabled && self.tuning.folds > self.simulation.n {
            return Err(schema("tuning.folds", "exceeds the training sample size"));
        }
        if self.evaluation.levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(schema("evaluation.levels", "levels must lie in (0, 1)"));
        }
        for &id in &self.scenarios {
            self.scenario_spec(id).validate().map_err(|e| schema("simulation.p", e.to_string()))?;
        }
        self.settings().validate()
    }

    pub fn settings(&self) -> MethodSettings {
        MethodSettings {
            gamma: self.gamma,
            delta: self.surrogate.delta,
            tuning: self.tuning.clone(),
            solver: self.solver.clone(),
            alternating: self.alternating.clone(),
        }
    }

    pub fn scenario_spec(&self, id: ScenarioId) -> ScenarioSpec {
        ScenarioSpec {
            id,
            n: self.simulation.n,
            p: if id == ScenarioId::Toy { 1 } else { self.simulation.p },
        }
    }

    /// SHA-256 (hex, 16 digits) of the result-determining configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("configs serialize"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A fitted rule with its tuning and solver diagnostics.
#[derive(Debug, Clone)]
pub struct FittedMethod {
    pub model: RuleModel,
    pub lambda: Option<f64>,
    pub bandwidth: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub cv: Option<CvOutcome>,
    pub trace: Vec<serde_json::Value>,
}

fn to_values<T: Serialize>(items: &[T]) -> Vec<serde_json::Value> {
    items.iter().map(|t| serde_json::to_value(t).expect("trace serializes")).collect()
}

/// Tuning grid for a method, or `None` for untuned methods.
pub fn method_grid(method: Method, data: &TrialDataset, settings: &MethodSettings) -> Option<(Vec<Learner>, CriterionKind)> {
    let t = &settings.tuning;
    if let Some((penalty, kernel, target)) = method.dca_parts() {
        let (form, bandwidths) = if kernel {
            let base = median_distance(data.covariates(), data.dim());
            let b: Vec<f64> = t.bandwidth_multipliers.iter().map(|m| m * base).collect();
            (FormSpec::Kernel { bandwidth: b[0] }, b)
        } else {
            (FormSpec::Linear, Vec::new())
        };
        let base = settings.dca_config(penalty, target, form, t.lambda);
        let kind = if target == Target::M0 { CriterionKind::M0 } else { CriterionKind::M1 };
        Some((dca_grid(&base, &t.lambdas, &bandwidths), kind))
    } else if method == Method::L1Pls {
        Some((pls_grid(&t.lambdas), CriterionKind::Value))
    } else {
        None
    }
}

/// Cross-validates a method on `data`.
pub fn tune_method(method: Method, data: &TrialDataset, settings: &MethodSettings, source: &RandomSource) -> Result<CvOutcome, RunnerError> {
    let (grid, kind) = method_grid(method, data, settings).ok_or_else(|| RunnerError::Argument(format!("method {method} has no tuning grid")))?;
    cv_select(data, &grid, settings.tuning.folds, kind, settings.gamma, source).map_err(|e| RunnerError::Fit(e.to_string()))
}

/// Tunes (when enabled) and fits a method. `source.substream(0)` drives the
/// cross-validation and `source.substream(1)` the final fit.
pub fn fit_method(method: Method, data: &TrialDataset, settings: &MethodSettings, source: &RandomSource) -> Result<FittedMethod, RunnerError> {
    settings.validate()?;
    let fit_err = |e: String| RunnerError::Fit(format!("{method}: {e}"));
    if method == Method::Alternating {
        let config = AltConfig {
            gamma: settings.gamma,
            max_alternations: settings.alternating.max_alternations,
            restarts: settings.alternating.restarts,
        };
        let family = SurrogateLinear {
            lambda: settings.alternating.lambda,
            surrogate: SurrogateParams::new(settings.delta).expect("validated delta"),
        };
        let fit = alternate_fit(data, &config, &family, &mut source.substream(1).rng()).map_err(|e| fit_err(e.to_string()))?;
        return Ok(FittedMethod {
            model: RuleModel::Alternating {
                rule: fit.rule,
                scaling: data.scaling().cloned(),
            },
            lambda: Some(settings.alternating.lambda),
            bandwidth: None,
            iterations: fit.trace.len(),
            converged: fit.converged || fit.cycled,
            cv: None,
            trace: to_values(&fit.trace),
        });
    }
    let (grid, _) = method_grid(method, data, settings).expect("every other method has a grid");
    let (learner, cv) = if settings.tuning.enabled {
        let cv = tune_method(method, data, settings, &source.substream(0))?;
        (cv.best_learner.clone(), Some(cv))
    } else {
        let fixed = grid
            .into_iter()
            .find(|l| l.lambda() == settings.tuning.lambda)
            .unwrap_or_else(|| with_lambda(method, data, settings));
        (fixed, None)
    };
    let fit_source = source.substream(1);
    match &learner {
        Learner::Dca(config) => {
            let (model, state) = dca_fit(data, config, &mut fit_source.rng()).map_err(|e| fit_err(e.to_string()))?;
            Ok(FittedMethod {
                model: RuleModel::Surrogate(model),
                lambda: Some(config.lambda),
                bandwidth: learner.bandwidth(),
                iterations: state.iterations,
                converged: state.converged,
                cv,
                trace: to_values(&state.trace),
            })
        }
        Learner::Pls { lambda, options } => {
            let model = pls_fit(data, *lambda, options).map_err(|e| fit_err(e.to_string()))?;
            let trace = vec![json!({ "sweeps": model.sweeps, "converged": model.converged, "objective": model.objective(data) })];
            Ok(FittedMethod {
                lambda: Some(*lambda),
                bandwidth: None,
                iterations: model.sweeps,
                converged: model.converged,
                model: RuleModel::LeastSquares(model),
                cv,
                trace,
            })
        }
    }
}

/// The untuned learner at `tuning.lambda` (median-distance bandwidth).
fn with_lambda(method: Method, data: &TrialDataset, settings: &MethodSettings) -> Learner {
    let lambda = settings.tuning.lambda;
    match method.dca_parts() {
        Some((penalty, kernel, target)) => {
            let form = if kernel {
                FormSpec::Kernel {
                    bandwidth: median_distance(data.covariates(), data.dim()),
                }
            } else {
                FormSpec::Linear
            };
            Learner::Dca(settings.dca_config(penalty, target, form, lambda))
        }
        None => Learner::Pls {
            lambda,
            options: PlsOptions::default(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

/// One (scenario, method, replication) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub scenario: ScenarioId,
    pub method: Method,
    pub rep: usize,
    #[serde(flatten)]
    pub status: RunStatus,
    pub lambda: Option<f64>,
    pub bandwidth: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub evaluation: Option<RuleEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: ScenarioId,
    pub method: Method,
    pub reps_completed: usize,
    pub reps_failed: usize,
    pub report: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub traces: Vec<(String, Vec<serde_json::Value>)>,
    pub summary: Vec<SummaryRow>,
}

pub fn run_id(scenario: ScenarioId, method: Method, rep: usize) -> String {
    format!("{}_{}_rep{:03}", scenario.name(), method.name(), rep)
}

struct RepOutput {
    runs: Vec<RunRecord>,
    traces: Vec<(String, Vec<serde_json::Value>)>,
    data: Option<TrialDataset>,
}

fn run_replication(config: &ExperimentConfig, settings: &MethodSettings, id: ScenarioId, rep: usize) -> RepOutput {
    let spec = config.scenario_spec(id);
    let source = RandomSource::new(config.seed).substream(id.index()).substream(rep as u64);
    let generated = spec
        .generate(&mut source.substream(0).rng())
        .and_then(|(data, _)| spec.draw_population(config.simulation.n_test, &mut source.substream(1).rng()).map(|t| (data, t)));
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    let (data, test) = match generated {
        Ok(dt) => dt,
        Err(e) => {
            for &method in &config.methods {
                runs.push(failed(id, method, rep, format!("simulation: {e}")));
            }
            return RepOutput { runs, traces, data: None };
        }
    };
    for &method in &config.methods {
        let method_source = source.substream(100 + method.index());
        let outcome = fit_method(method, &data, settings, &method_source)
            .and_then(|f| test.evaluate(&f.model, &config.evaluation.levels).map(|e| (f, e)).map_err(|e| RunnerError::Fit(e.to_string())));
        match outcome {
            Ok((fitted, evaluation)) => {
                let rid = run_id(id, method, rep);
                traces.push((rid.clone(), fitted.trace));
                runs.push(RunRecord {
                    run_id: rid,
                    scenario: id,
                    method,
                    rep,
                    status: RunStatus::Ok,
                    lambda: fitted.lambda,
                    bandwidth: fitted.bandwidth,
                    iterations: Some(fitted.iterations),
                    converged: Some(fitted.converged),
                    evaluation: Some(evaluation),
                });
            }
            Err(e) => runs.push(failed(id, method, rep, e.to_string())),
        }
    }
    RepOutput {
        runs,
        traces,
        data: config.simulation.export_data.then_some(data),
    }
}

fn failed(scenario: ScenarioId, method: Method, rep: usize, error: String) -> RunRecord {
    RunRecord {
        run_id: run_id(scenario, method, rep),
        scenario,
        method,
        rep,
        status: RunStatus::Failed { error },
        lambda: None,
        bandwidth: None,
        iterations: None,
        converged: None,
        evaluation: None,
    }
}

/// Runs every (scenario, method, replication) and aggregates; writes nothing.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    Ok(run_collect(config)?.0)
}

fn run_collect(config: &ExperimentConfig) -> Result<(ExperimentReport, Vec<(String, TrialDataset)>), RunnerError> {
    config.validate()?;
    let settings = config.settings();
    let tasks: Vec<(ScenarioId, usize)> = config.scenarios.iter().flat_map(|&s| (0..config.reps).map(move |r| (s, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| RunnerError::Argument(format!("cannot start {} workers: {e}", config.jobs)))?;
    let outputs: Vec<RepOutput> = pool.install(|| tasks.par_iter().map(|&(s, r)| run_replication(config, &settings, s, r)).collect());
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    let mut datasets = Vec::new();
    for ((s, r), out) in tasks.iter().zip(outputs) {
        runs.extend(out.runs);
        traces.extend(out.traces);
        if let Some(d) = out.data {
            datasets.push((format!("{}_rep{:03}", s.name(), r), d));
        }
    }
    let mut summary = Vec::new();
    for &scenario in &config.scenarios {
        for &method in &config.methods {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.scenario == scenario && r.method == method).collect();
            let evals: Vec<RuleEvaluation> = mine.iter().filter_map(|r| r.evaluation.clone()).collect();
            summary.push(SummaryRow {
                scenario,
                method,
                reps_completed: evals.len(),
                reps_failed: mine.len() - evals.len(),
                report: EvaluationReport::from_replications(evals),
            });
        }
    }
    let report = ExperimentReport {
        config: config.clone(),
        config_hash: config.hash(),
        runs,
        traces,
        summary,
    };
    Ok((report, datasets))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn level_column(level: f64) -> String {
    format!("q{}_mean", (level * 100.0).to_string().replace('.', "_"))
}

impl ExperimentReport {
    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["scenario", "method", "misclass_mean", "misclass_sd", "value_mean"].iter().map(|s| s.to_string()).collect();
        header.extend(self.config.evaluation.levels.iter().map(|&l| level_column(l)));
        header.extend(["reps_completed", "reps_failed", "version", "config_hash", "seed"].iter().map(|s| s.to_string()));
        w.write_record(&header).expect("in-memory write");
        for row in &self.summary {
            let mut rec = vec![row.scenario.name().to_string(), row.method.name().to_string()];
            match &row.report {
                Some(r) => {
                    rec.extend([cell(r.misclass_mean), cell(r.misclass_sd), r.value_mean.to_string()]);
                    rec.extend(self.config.evaluation.levels.iter().map(|&l| cell(r.quantile_mean(l))));
                }
                None => rec.extend(std::iter::repeat(String::new()).take(3 + self.config.evaluation.levels.len())),
            }
            rec.extend([
                row.reps_completed.to_string(),
                row.reps_failed.to_string(),
                VERSION.to_string(),
                self.config_hash.clone(),
                self.config.seed.to_string(),
            ]);
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn detail_json(&self) -> String {
        let summary: Vec<serde_json::Value> = self
            .summary
            .iter()
            .map(|s| {
                let r = s.report.as_ref();
                json!({
                    "scenario": s.scenario,
                    "method": s.method,
                    "reps_completed": s.reps_completed,
                    "reps_failed": s.reps_failed,
                    "misclass_mean": r.and_then(|r| r.misclass_mean),
                    "misclass_sd": r.and_then(|r| r.misclass_sd),
                    "value_mean": r.map(|r| r.value_mean),
                    "quantile_means": r.map(|r| r.quantile_means.clone()),
                })
            })
            .collect();
        let doc = json!({
            "version": VERSION,
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "config": self.config,
            "summary": summary,
            "runs": self.runs,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    fn trace_jsonl(&self, run_id: &str, records: &[serde_json::Value]) -> String {
        let mut out = serde_json::to_string(&json!({
            "run_id": run_id,
            "version": VERSION,
            "config_hash": self.config_hash,
            "seed": self.config.seed,
        }))
        .expect("header serializes");
        out.push('\n');
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `summary.csv`, `detail.json` and `traces/<run-id>.jsonl`.
    pub fn write(&self, outdir: &Path) -> Result<(), RunnerError> {
        let traces = outdir.join("traces");
        fs::create_dir_all(&traces).map_err(io_err(&traces))?;
        let summary = outdir.join("summary.csv");
        fs::write(&summary, self.summary_csv()).map_err(io_err(&summary))?;
        let detail = outdir.join("detail.json");
        fs::write(&detail, self.detail_json()).map_err(io_err(&detail))?;
        for (id, records) in &self.traces {
            let path = traces.join(format!("{id}.jsonl"));
            fs::write(&path, self.trace_jsonl(id, records)).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Runs the experiment and writes its report files under `config.outdir`.
pub fn run_and_write(config: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    let (report, datasets) = run_collect(config)?;
    report.write(&config.outdir)?;
    if !datasets.is_empty() {
        let dir = config.outdir.join("data");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (name, data) in datasets {
            data.write_csv(dir.join(format!("{name}.csv")))?;
        }
    }
    Ok(report)
}

/// Options for fitting on a user dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub method: Method,
    pub settings: MethodSettings,
    /// Share of records held out for evaluation, in (0, 1).
    pub test_fraction: f64,
    /// Quantile levels reported on the held-out part.
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            method: Method::L1DcCvar,
            settings: MethodSettings::default(),
            test_fraction: 0.2,
            levels: vec![0.25, 0.1],
            seed: 1,
        }
    }
}

/// Inverse-propensity criteria of a rule on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    pub n: usize,
    pub value_mean: f64,
    /// `(level, weighted quantile of matched outcomes)`.
    pub quantiles: Vec<(f64, Option<f64>)>,
    pub m0: f64,
    pub m1: f64,
    pub gamma: f64,
    pub share_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub seed: u64,
    pub method: Method,
    pub n_train: usize,
    pub lambda: Option<f64>,
    pub bandwidth: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub held_out: HeldOutMetrics,
}

/// Evaluates a rule by inverse-propensity weighting on observed data.
pub fn evaluate_rule(rule: &dyn Rule, data: &TrialDataset, gamma: f64, levels: &[f64]) -> Result<HeldOutMetrics, RunnerError> {
    let d: RulePredictions = rule.predict(data);
    let err = |e: crate::criteria::CriterionError| RunnerError::Fit(e.to_string());
    let quantiles = levels.iter().map(|&l| (l, evaluate_quantile(data, &d, l).ok().map(|q| q.value))).collect();
    let plus = d.as_slice().iter().filter(|&&a| a == crate::data::Action::Plus).count();
    Ok(HeldOutMetrics {
        n: data.len(),
        value_mean: evaluate_value(data, &d).map_err(err)?.value,
        quantiles,
        m0: evaluate_m0(data, &d, gamma).map_err(err)?.value,
        m1: evaluate_m1(data, &d, gamma).map_err(err)?.value,
        gamma,
        share_plus: plus as f64 / data.len().max(1) as f64,
    })
}

/// Random train/test split of `0..n`; the test part has
/// `round(n · fraction)` records, at least one, and leaves one for training.
pub fn holdout_split(n: usize, fraction: f64, source: &RandomSource) -> Result<(Vec<usize>, Vec<usize>), RunnerError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RunnerError::Argument(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n_test = ((n as f64 * fraction).round() as usize).max(1);
    if n_test >= n {
        return Err(RunnerError::Argument(format!("cannot hold out {n_test} of {n} records")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut source.rng());
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Splits, fits on the training part and evaluates on the held-out part.
pub fn fit_dataset(data: &TrialDataset, options: &FitOptions) -> Result<(RuleModel, FitReport), RunnerError> {
    if options.levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(RunnerError::Argument("quantile levels must lie in (0, 1)".into()));
    }
    let source = RandomSource::new(options.seed);
    let (train_idx, test_idx) = holdout_split(data.len(), options.test_fraction, &source.substream(0))?;
    let (train, test) = (data.subset(&train_idx), data.subset(&test_idx));
    let fitted = fit_method(options.method, &train, &options.settings, &source.substream(1))?;
    let held_out = evaluate_rule(&fitted.model, &test, options.settings.gamma, &options.levels)?;
    let report = FitReport {
        version: VERSION.into(),
        seed: options.seed,
        method: options.method,
        n_train: train.len(),
        lambda: fitted.lambda,
        bandwidth: fitted.bandwidth,
        iterations: fitted.iterations,
        converged: fitted.converged,
        held_out,
    };
    Ok((fitted.model, report))
}

/// [`fit_dataset`] on a CSV file, optionally persisting the model as JSON.
pub fn fit_csv(path: &Path, schema: &CsvSchema, options: &FitOptions, model_out: Option<&Path>) -> Result<FitReport, RunnerError> {
    let data = load_csv(path, schema)?;
    let (model, report) = fit_dataset(&data, options)?;
    if let Some(out) = model_out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(out, model.to_json()).map_err(io_err(out))?;
    }
    Ok(report)
}

/// Scenario names accepted on the command line.
pub fn scenario_names() -> BTreeSet<&'static str> {
    ScenarioId::ALL.iter().map(|s| s.name()).collect()
}
