//! Trial data: observed (covariates, action, outcome) triples with known
//! propensities, CSV ingestion, k-fold partitioning and the seeded randomness
//! contract used everywhere else in the crate.
//!
//! Records are stored column-wise (flat row-major covariate matrix plus one
//! vector per scalar field) so solvers can stream over them without copying.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default overlap constant: propensities must lie in `[c, 1 - c]`.
pub const DEFAULT_OVERLAP: f64 = 0.01;

/// One of the two available actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "+1")]
    Plus,
    #[serde(rename = "-1")]
    Minus,
}

impl Action {
    /// Sign of a score, with `sign(0) = +1`.
    #[inline]
    pub fn from_score(score: f64) -> Self {
        if score >= 0.0 {
            Action::Plus
        } else {
            Action::Minus
        }
    }

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Action::Plus => 1.0,
            Action::Minus => -1.0,
        }
    }

    #[inline]
    pub fn flip(self) -> Self {
        match self {
            Action::Plus => Action::Minus,
            Action::Minus => Action::Plus,
        }
    }

    pub fn from_label(value: i64) -> Option<Self> {
        match value {
            1 => Some(Action::Plus),
            -1 => Some(Action::Minus),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Plus => f.write_str("1"),
            Action::Minus => f.write_str("-1"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must contain at least one record")]
    Empty,
    #[error("record {row}: expected {expected} covariates, found {found}")]
    Dimension {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {row}: propensity {value} outside [{low}, {high}]")]
    Propensity {
        row: usize,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("record {row}: outcome is not finite")]
    Outcome { row: usize },
    #[error("record {row}: covariate {column} is not finite")]
    Covariate { row: usize, column: usize },
    #[error("column {0:?} not found in CSV header")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: cannot parse {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: action value {value} is not a valid action")]
    InvalidAction { row: usize, value: String },
    #[error("column {0:?} has zero variance and cannot be standardized")]
    DegenerateScaling(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine standardization `x' = (x - shift) / scale` of selected covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub columns: Vec<ColumnScaling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    /// Covariate index (0-based, in covariate order).
    pub index: usize,
    pub shift: f64,
    pub scale: f64,
}

impl Scaling {
    /// Standardizes the requested columns of a flat row-major matrix to zero
    /// mean and unit (population) variance, returning the transform.
    pub fn standardize(
        x: &mut [f64],
        dim: usize,
        columns: &[usize],
        names: &[String],
    ) -> Result<Self, DataError> {
        let n = x.len() / dim.max(1);
        let mut out = Vec::with_capacity(columns.len());
        for &c in columns {
            let mean = (0..n).map(|i| x[i * dim + c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x[i * dim + c] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(DataError::DegenerateScaling(
                    names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                ));
            }
            out.push(ColumnScaling {
                index: c,
                shift: mean,
                scale: sd,
            });
        }
        let scaling = Scaling { columns: out };
        for row in x.chunks_mut(dim) {
            scaling.apply(row);
        }
        Ok(scaling)
    }

    pub fn apply(&self, x: &mut [f64]) {
        for c in &self.columns {
            x[c.index] = (x[c.index] - c.shift) / c.scale;
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for c in &self.columns {
            x[c.index] = x[c.index] * c.scale + c.shift;
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.columns
            .iter()
            .all(|c| c.scale != 0.0 && c.scale.is_finite() && c.shift.is_finite())
    }
}

/// A single observed record, borrowed from a [`TrialDataset`].
#[derive(Debug, Clone, Copy)]
pub struct TrialRecord<'a> {
    pub covariates: &'a [f64],
    pub action: Action,
    pub outcome: f64,
    pub propensity: f64,
}

/// Immutable, validated sample of trial records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    dim: usize,
    covariates: Vec<f64>,
    actions: Vec<Action>,
    outcomes: Vec<f64>,
    propensities: Vec<f64>,
    scaling: Option<Scaling>,
}

impl TrialDataset {
    /// Builds a dataset from a flat row-major covariate matrix, validating
    /// propensities against the overlap constant `c`: every propensity must
    /// lie in `[c, 1 - c]`. `c = 0` admits any propensity in `(0, 1]`, which
    /// is only meaningful for on-policy evaluation data.
    pub fn new(
        dim: usize,
        covariates: Vec<f64>,
        actions: Vec<Action>,
        outcomes: Vec<f64>,
        propensities: Vec<f64>,
        overlap: f64,
    ) -> Result<Self, DataError> {
        let n = actions.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if outcomes.len() != n || propensities.len() != n {
            return Err(DataError::Argument(format!(
                "field lengths differ: {} actions, {} outcomes, {} propensities",
                n,
                outcomes.len(),
                propensities.len()
            )));
        }
        if dim == 0 || covariates.len() != n * dim {
            return Err(DataError::Dimension {
                row: 0,
                expected: dim,
                found: covariates.len() / n.max(1),
            });
        }
        if !(0.0..0.5).contains(&overlap) {
            return Err(DataError::Argument(format!(
                "overlap constant must lie in [0, 0.5), got {overlap}"
            )));
        }
        for i in 0..n {
            let p = propensities[i];
            if !(p > 0.0 && p >= overlap && p <= 1.0 - overlap) {
                return Err(DataError::Propensity {
                    row: i,
                    value: p,
                    low: overlap,
                    high: 1.0 - overlap,
                });
            }
            if !outcomes[i].is_finite() {
                return Err(DataError::Outcome { row: i });
            }
            if let Some(c) = covariates[i * dim..(i + 1) * dim]
                .iter()
                .position(|v| !v.is_finite())
            {
                return Err(DataError::Covariate { row: i, column: c });
            }
        }
        Ok(Self {
            dim,
            covariates,
            actions,
            outcomes,
            propensities,
            scaling: None,
        })
    }

    /// Convenience constructor from per-record rows, using the default
    /// overlap constant.
    pub fn from_rows(
        rows: &[Vec<f64>],
        actions: Vec<Action>,
        outcomes: Vec<f64>,
        propensities: Vec<f64>,
    ) -> Result<Self, DataError> {
        Self::from_rows_with_overlap(rows, actions, outcomes, propensities, DEFAULT_OVERLAP)
    }

    pub fn from_rows_with_overlap(
        rows: &[Vec<f64>],
        actions: Vec<Action>,
        outcomes: Vec<f64>,
        propensities: Vec<f64>,
        overlap: f64,
    ) -> Result<Self, DataError> {
        let dim = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(DataError::Dimension {
                    row: i,
                    expected: dim,
                    found: r.len(),
                });
            }
        }
        let flat = rows.iter().flatten().copied().collect();
        Self::new(dim, flat, actions, outcomes, propensities, overlap)
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Result<Self, DataError> {
        if !scaling.is_invertible() {
            return Err(DataError::Argument("scaling transform is not invertible".into()));
        }
        self.scaling = Some(scaling);
        Ok(self)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.dim..(i + 1) * self.dim]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    pub fn scaling(&self) -> Option<&Scaling> {
        self.scaling.as_ref()
    }

    pub fn record(&self, i: usize) -> TrialRecord<'_> {
        TrialRecord {
            covariates: self.x(i),
            action: self.actions[i],
            outcome: self.outcomes[i],
            propensity: self.propensities[i],
        }
    }

    pub fn records(&self) -> impl Iterator<Item = TrialRecord<'_>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }

    /// Sub-sample by index (indices may repeat). The scaling transform is kept.
    pub fn subset(&self, idx: &[usize]) -> TrialDataset {
        let mut covariates = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            covariates.extend_from_slice(self.x(i));
        }
        TrialDataset {
            dim: self.dim,
            covariates,
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            outcomes: idx.iter().map(|&i| self.outcomes[i]).collect(),
            propensities: idx.iter().map(|&i| self.propensities[i]).collect(),
            scaling: self.scaling.clone(),
        }
    }

    /// Same records with outcomes replaced.
    pub fn with_outcomes(&self, outcomes: Vec<f64>) -> Result<TrialDataset, DataError> {
        if outcomes.len() != self.len() {
            return Err(DataError::Argument("outcome vector length mismatch".into()));
        }
        if let Some(row) = outcomes.iter().position(|r| !r.is_finite()) {
            return Err(DataError::Outcome { row });
        }
        let mut out = self.clone();
        out.outcomes = outcomes;
        Ok(out)
    }

    /// Writes the dataset as CSV with columns `x1..xp,a,r,propensity`.
    /// Values use the shortest round-trip float representation.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        header.extend(["a".into(), "r".into(), "propensity".into()]);
        w.write_record(&header)?;
        for rec in self.records() {
            let mut row: Vec<String> = rec.covariates.iter().map(f64::to_string).collect();
            row.push(rec.action.to_string());
            row.push(rec.outcome.to_string());
            row.push(rec.propensity.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How actions are coded in the input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionCoding {
    /// Values in {+1, -1}.
    #[default]
    Signed,
    /// Values in {1, 0}, mapped to {+1, -1}.
    ZeroOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensitySource {
    Column(String),
    Constant(f64),
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub action: String,
    pub outcome: String,
    pub propensity: PropensitySource,
    #[serde(default)]
    pub action_coding: ActionCoding,
    /// Covariates to standardize to zero mean, unit variance.
    #[serde(default)]
    pub scale: Vec<String>,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
}

fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}

impl CsvSchema {
    pub fn new(covariates: Vec<String>, action: &str, outcome: &str, propensity: PropensitySource) -> Self {
        Self {
            covariates,
            action: action.into(),
            outcome: outcome.into(),
            propensity,
            action_coding: ActionCoding::Signed,
            scale: Vec::new(),
            overlap: DEFAULT_OVERLAP,
        }
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
        row,
        column: column.into(),
        value: raw.into(),
    })
}

/// Column names of a CSV file's header row.
pub fn read_header(path: impl AsRef<Path>) -> Result<Vec<String>, DataError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

/// Loads and validates a CSV file. Row numbers in errors count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TrialDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset, DataError> {
    if schema.covariates.is_empty() {
        return Err(DataError::Schema("at least one covariate column is required".into()));
    }
    if let PropensitySource::Constant(p) = schema.propensity {
        if !(p > 0.0 && p < 1.0) {
            return Err(DataError::Propensity {
                row: 0,
                value: p,
                low: schema.overlap,
                high: 1.0 - schema.overlap,
            });
        }
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.into()))
    };
    let cov_idx: Vec<usize> = schema.covariates.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let a_idx = find(&schema.action)?;
    let r_idx = find(&schema.outcome)?;
    let p_idx = match &schema.propensity {
        PropensitySource::Column(c) => Some(find(c)?),
        PropensitySource::Constant(_) => None,
    };
    let scale_idx: Vec<usize> = schema
        .scale
        .iter()
        .map(|c| {
            schema
                .covariates
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| DataError::Schema(format!("scaled column {c:?} is not a covariate")))
        })
        .collect::<Result<_, _>>()?;

    let dim = cov_idx.len();
    let mut x = Vec::new();
    let mut actions = Vec::new();
    let mut outcomes = Vec::new();
    let mut props = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        for (&ci, name) in cov_idx.iter().zip(&schema.covariates) {
            x.push(parse_cell(cell(ci), row, name)?);
        }
        let raw_a = cell(a_idx).trim();
        let a_val = parse_cell(raw_a, row, &schema.action)?;
        let action = match (schema.action_coding, a_val) {
            (ActionCoding::Signed, v) if v == 1.0 => Some(Action::Plus),
            (ActionCoding::Signed, v) if v == -1.0 => Some(Action::Minus),
            (ActionCoding::ZeroOne, v) if v == 1.0 => Some(Action::Plus),
            (ActionCoding::ZeroOne, v) if v == 0.0 => Some(Action::Minus),
            _ => None,
        }
        .ok_or_else(|| DataError::InvalidAction {
            row,
            value: raw_a.into(),
        })?;
        actions.push(action);
        outcomes.push(parse_cell(cell(r_idx), row, &schema.outcome)?);
        let p = match (&schema.propensity, p_idx) {
            (PropensitySource::Column(name), Some(pi)) => parse_cell(cell(pi), row, name)?,
            (PropensitySource::Constant(p), _) => *p,
            _ => unreachable!(),
        };
        if !(p > 0.0 && p < 1.0) || p < schema.overlap || p > 1.0 - schema.overlap {
            return Err(DataError::Propensity {
                row,
                value: p,
                low: schema.overlap,
                high: 1.0 - schema.overlap,
            });
        }
        props.push(p);
    }
    if actions.is_empty() {
        return Err(DataError::Empty);
    }
    let scaling = if scale_idx.is_empty() {
        None
    } else {
        Some(Scaling::standardize(&mut x, dim, &scale_idx, &schema.covariates)?)
    };
    let ds = TrialDataset::new(dim, x, actions, outcomes, props, schema.overlap)?;
    match scaling {
        Some(s) => ds.with_scaling(s),
        None => Ok(ds),
    }
}

/// Seeded, portable random stream. Identical `(seed, stream)` pairs give
/// identical draws on every platform (ChaCha8).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomSource {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derives an independent child source; the same `tag` always yields the
    /// same child, whatever else was drawn from the parent.
    pub fn substream(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// One train/validation split; indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffles `0..n` and cuts it into `k` validation folds whose sizes differ
/// by at most one (larger folds first).
pub fn split_kfold(n: usize, k: usize, rng: &RandomSource) -> Result<Vec<Fold>, DataError> {
    if k < 2 {
        return Err(DataError::Argument(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(DataError::Argument(format!("k = {k} exceeds sample size {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.rng());
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut validation = idx[start..start + size].to_vec();
        validation.sort_unstable();
        let mut train: Vec<usize> = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(folds)
}
