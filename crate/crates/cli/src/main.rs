use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cvar_idr::data::{load_csv, read_header, ActionCoding, CsvSchema, PropensitySource, RandomSource};
use cvar_idr::model::RuleModel;
use cvar_idr::runner::{
    evaluate_rule, fit_csv, run_and_write, tune_method, ExperimentConfig, FitOptions, Method, MethodSettings, Overrides, RunnerError, VERSION,
};
use cvar_idr::simlab::{ScenarioId, ScenarioSpec};

#[derive(Parser)]
#[command(name = "cvar-idr", version = VERSION, about = "CVaR-optimal individualized decision rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation experiment and write summary.csv, detail.json and traces.
    Simulate(SimulateArgs),
    /// Fit a rule on a CSV dataset and report held-out criteria.
    Fit(FitArgs),
    /// Evaluate a saved rule on a CSV dataset or a simulated population.
    Evaluate(EvaluateArgs),
    /// Cross-validate a method on a CSV dataset and print the CV table.
    Tune(TuneArgs),
    /// Print the package version.
    Version,
}

#[derive(Args)]
struct ExperimentFlags {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario(s), e.g. S2,shift-1,toy.
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<ScenarioId>,
    /// Method(s), e.g. l1-dc-cvar,l1-pls.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

impl ExperimentFlags {
    fn config(&self) -> Result<ExperimentConfig, RunnerError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        config.apply(&Overrides {
            seed: self.seed,
            reps: self.reps,
            jobs: self.jobs,
            outdir: self.outdir.clone(),
            scenarios: (!self.scenario.is_empty()).then(|| self.scenario.clone()),
            methods: (!self.method.is_empty()).then(|| self.method.clone()),
            gamma: self.gamma,
            delta: self.delta,
            n: self.n,
            p: self.p,
            n_test: self.n_test,
            export_data: None,
        });
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    /// Also write every training set to <outdir>/data/.
    #[arg(long)]
    export_data: bool,
}

#[derive(Args)]
struct SchemaFlags {
    /// Input CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Covariate columns (default: every column not used otherwise).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, default_value = "a")]
    action_col: String,
    #[arg(long, default_value = "r")]
    outcome_col: String,
    /// Known constant propensity of the observed actions.
    #[arg(long, conflicts_with = "propensity_col")]
    propensity: Option<f64>,
    /// Column holding the propensity of each observed action.
    #[arg(long)]
    propensity_col: Option<String>,
    /// Actions coded as 0/1 instead of -1/+1.
    #[arg(long)]
    zero_one_actions: bool,
    /// Standardize all covariates before fitting.
    #[arg(long)]
    scale: bool,
}

impl SchemaFlags {
    fn schema(&self) -> Result<CsvSchema> {
        let propensity = match (&self.propensity, &self.propensity_col) {
            (Some(p), _) => PropensitySource::Constant(*p),
            (None, Some(c)) => PropensitySource::Column(c.clone()),
            (None, None) => PropensitySource::Column("propensity".into()),
        };
        let covariates = if self.covariates.is_empty() {
            let used = [Some(&self.action_col), Some(&self.outcome_col), self.propensity_col.as_ref().or(match &propensity {
                PropensitySource::Column(c) => Some(c),
                PropensitySource::Constant(_) => None,
            })];
            read_header(&self.data)
                .with_context(|| format!("reading {}", self.data.display()))?
                .into_iter()
                .filter(|h| !used.iter().flatten().any(|u| *u == h))
                .collect()
        } else {
            self.covariates.clone()
        };
        let mut schema = CsvSchema::new(covariates, &self.action_col, &self.outcome_col, propensity);
        if self.zero_one_actions {
            schema.action_coding = ActionCoding::ZeroOne;
        }
        if self.scale {
            schema.scale = schema.covariates.clone();
        }
        Ok(schema)
    }
}

#[derive(Args)]
struct SettingsFlags {
    /// TOML configuration file; its gamma, surrogate, tuning, solver and
    /// alternating sections apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "l1-dc-cvar")]
    method: Method,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Skip tuning and use this λ.
    #[arg(long)]
    lambda: Option<f64>,
}

impl SettingsFlags {
    fn settings(&self) -> Result<MethodSettings, RunnerError> {
        let mut settings = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?.settings(),
            None => MethodSettings::default(),
        };
        if let Some(g) = self.gamma {
            settings.gamma = g;
        }
        if let Some(d) = self.delta {
            settings.delta = d;
        }
        if let Some(k) = self.folds {
            settings.tuning.folds = k;
        }
        if let Some(l) = self.lambda {
            settings.tuning.enabled = false;
            settings.tuning.lambda = l;
        }
        settings.validate()?;
        Ok(settings)
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    schema: SchemaFlags,
    #[command(flatten)]
    settings: SettingsFlags,
    /// Share of records held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Quantile levels reported on the held-out part.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.1")]
    levels: Vec<f64>,
    /// Where to write the fitted model as JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model JSON written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Observed data to evaluate on (inverse-propensity criteria).
    #[arg(long, required_unless_present = "scenario")]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, default_value = "a")]
    action_col: String,
    #[arg(long, default_value = "r")]
    outcome_col: String,
    #[arg(long, conflicts_with = "propensity_col")]
    propensity: Option<f64>,
    #[arg(long)]
    propensity_col: Option<String>,
    #[arg(long)]
    zero_one_actions: bool,
    /// Evaluate on a fresh population from this scenario instead.
    #[arg(long, conflicts_with = "data")]
    scenario: Option<ScenarioId>,
    #[arg(long, default_value_t = 20)]
    p: usize,
    #[arg(long, default_value_t = 10_000)]
    n_test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.25")]
    levels: Vec<f64>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    schema: SchemaFlags,
    #[command(flatten)]
    settings: SettingsFlags,
    /// Write the CV table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_model(path: &Path) -> Result<RuleModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RuleModel::from_json(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = args.flags.config()?;
    config.simulation.export_data |= args.export_data;
    let report = run_and_write(&config)?;
    print!("{}", report.summary_csv());
    let failed: usize = report.summary.iter().map(|r| r.reps_failed).sum();
    if failed > 0 {
        eprintln!("{failed} replication(s) failed; see detail.json");
    }
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let options = FitOptions {
        method: args.settings.method,
        settings: args.settings.settings()?,
        test_fraction: args.test_fraction,
        levels: args.levels,
        seed: args.settings.seed,
    };
    let schema = args.schema.schema()?;
    let report = fit_csv(&args.schema.data, &schema, &options, args.model_out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    if let Some(id) = args.scenario {
        let spec = ScenarioSpec {
            id,
            n: args.n_test,
            p: if id == ScenarioId::Toy { 1 } else { args.p },
        };
        let population = spec.draw_population(args.n_test, &mut RandomSource::new(args.seed).rng())?;
        let eval = population.evaluate(&model, &args.levels)?;
        println!("{}", serde_json::to_string_pretty(&eval)?);
        return Ok(());
    }
    let Some(data_path) = args.data else { bail!("--data or --scenario is required") };
    let flags = SchemaFlags {
        data: data_path,
        covariates: args.covariates,
        action_col: args.action_col,
        outcome_col: args.outcome_col,
        propensity: args.propensity,
        propensity_col: args.propensity_col,
        zero_one_actions: args.zero_one_actions,
        scale: false,
    };
    let data = load_csv(&flags.data, &flags.schema()?)?;
    let metrics = evaluate_rule(&model, &data, args.gamma, &args.levels)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn tune(args: TuneArgs) -> Result<()> {
    let settings = args.settings.settings()?;
    let data = load_csv(&args.schema.data, &args.schema.schema()?)?;
    let cv = tune_method(args.settings.method, &data, &settings, &RandomSource::new(args.settings.seed))?;
    let table = cv.to_csv();
    match args.out {
        Some(path) => std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{table}"),
    }
    eprintln!("best: lambda={} bandwidth={:?} score={}", cv.best_learner.lambda(), cv.best_learner.bandwidth(), cv.table[cv.best].mean);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Tune(a) => tune(a),
        Command::Version => {
            println!("cvar-idr {VERSION}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = match e.downcast_ref::<RunnerError>() {
                Some(r) => r.to_json(),
                None => serde_json::json!({ "error": "runtime", "message": format!("{e:#}") }),
            };
            eprintln!("{report}");
            ExitCode::from(if matches!(e.downcast_ref::<RunnerError>(), Some(RunnerError::Schema { .. } | RunnerError::Argument(_))) { 2 } else { 1 })
        }
    }
}
