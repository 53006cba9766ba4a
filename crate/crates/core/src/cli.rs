//! Command-line front end: `estimate` and `baselines` on a CSV file,
//! `simulate` for the Monte Carlo harness.
//!
//! Settings resolve as flag (or environment) over config file over default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, ColumnSchema, Dataset};
use crate::elasticnet::TauMode;
use crate::estimator::{baselines, r2ive_fit, BaselineResult, EstimatorTag, OracleSets, R2iveConfig, R2iveResult};
use crate::simulation::{format_report, run_monte_carlo, write_replications, Model, ReportStyle, SimConfig, PRESETS};
use crate::{R2iveError, Result};

#[derive(Debug, Parser)]
#[command(name = "r2ive", version, about = "Treatment effect estimation with many candidate instruments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the three-step estimator on a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on a preset or custom design.
    Simulate(SimulateArgs),
    /// Fit the comparison estimators on a CSV file.
    Baselines(BaselinesArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SchemaArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated instrument columns; entries may be globs such as `z*`.
    #[arg(long, value_delimiter = ',')]
    pub instruments: Option<Vec<String>>,
    /// Comma-separated exogenous covariates partialled out before fitting.
    #[arg(long, value_delimiter = ',')]
    pub exogenous: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TuningArgs {
    /// Spline degree of the first-stage basis.
    #[arg(long)]
    pub degree: Option<usize>,
    /// Comma-separated candidate basis dimensions per instrument.
    #[arg(long, value_delimiter = ',')]
    pub mn_grid: Option<Vec<usize>>,
    /// Comma-separated ridge levels of the second stage, as multiples of n.
    #[arg(long, value_delimiter = ',')]
    pub lambda2_factors: Option<Vec<f64>>,
    /// Number of points on each lasso-type penalty grid.
    #[arg(long)]
    pub n_lambda: Option<usize>,
    /// Extended-BIC exponent used by both stages.
    #[arg(long)]
    pub ebic_gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub tau_mode: Option<TauMode>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum)]
    pub format: Option<ReportStyle>,
    /// Also write the result to this file.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// TOML file with defaults for any of these settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BaselinesArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Instruments known to be relevant; enables ORACLE_TSLS with `--oracle-valid`.
    #[arg(long, value_delimiter = ',', requires = "oracle_valid")]
    pub oracle_relevant: Option<Vec<String>>,
    /// Instruments known to be valid.
    #[arg(long, value_delimiter = ',', requires = "oracle_relevant")]
    pub oracle_valid: Option<Vec<String>>,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Named design; see the error message of an unknown name for the list.
    #[arg(long)]
    pub preset: Option<String>,
    /// Sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of candidate instruments.
    #[arg(long = "L", id = "L")]
    pub l: Option<usize>,
    /// Number of relevant instruments.
    #[arg(long)]
    pub s1: Option<usize>,
    /// Number of invalid instruments.
    #[arg(long)]
    pub s2: Option<usize>,
    /// Offset of the first invalid instrument.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long, value_enum)]
    pub model: Option<Model>,
    /// Number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Base seed; replication `r` depends only on the seed and `r`.
    #[arg(long, env = "R2IVE_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated estimators to run; all by default.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Write one CSV row per replication and estimator.
    #[arg(long)]
    pub replications_out: Option<PathBuf>,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    pub instruments: Option<Vec<String>>,
    pub exogenous: Option<Vec<String>>,
    pub oracle_relevant: Option<Vec<String>>,
    pub oracle_valid: Option<Vec<String>>,
    pub preset: Option<String>,
    pub n: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub s1: Option<usize>,
    pub s2: Option<usize>,
    pub q: Option<usize>,
    pub model: Option<Model>,
    pub beta_star: Option<f64>,
    pub rho: Option<f64>,
    pub error_corr: Option<f64>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub format: Option<ReportStyle>,
    pub output: Option<PathBuf>,
    pub replications_out: Option<PathBuf>,
    /// Full estimator settings; the tuning flags override single fields.
    pub tuning: Option<R2iveConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| R2iveError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text)
            .map_err(|e| R2iveError::Input(format!("config {}: {}", path.display(), one_line(&e.to_string()))))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// What to run, with every setting resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Estimate {
        input: PathBuf,
        schema: ColumnSchema,
        tuning: R2iveConfig,
        format: ReportStyle,
        output: Option<PathBuf>,
    },
    Baselines {
        input: PathBuf,
        schema: ColumnSchema,
        oracle: Option<(Vec<String>, Vec<String>)>,
        tuning: R2iveConfig,
        format: ReportStyle,
        output: Option<PathBuf>,
    },
    Simulate {
        sim: SimConfig,
        estimators: Vec<EstimatorTag>,
        workers: usize,
        tuning: R2iveConfig,
        format: ReportStyle,
        output: Option<PathBuf>,
        replications_out: Option<PathBuf>,
    },
}

fn load_file(output: &OutputArgs) -> Result<FileConfig> {
    match &output.config {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn resolve_tuning(flags: &TuningArgs, file: &FileConfig) -> Result<R2iveConfig> {
    let mut cfg = file.tuning.clone().unwrap_or_default();
    if let Some(h) = flags.degree {
        cfg.first_stage.degree = h;
    }
    if let Some(grid) = &flags.mn_grid {
        if grid.is_empty() || grid.contains(&0) {
            return Err(R2iveError::Input("--mn-grid needs positive basis dimensions".into()));
        }
        cfg.first_stage.basis_grid = Some(grid.clone());
    }
    if let Some(f) = &flags.lambda2_factors {
        if f.is_empty() || f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(R2iveError::Input("--lambda2-factors needs finite nonnegative values".into()));
        }
        cfg.second_stage.lambda2_factors = f.clone();
    }
    if let Some(k) = flags.n_lambda {
        if k < 2 {
            return Err(R2iveError::Input("--n-lambda must be at least 2".into()));
        }
        cfg.first_stage.n_lambda = k;
        cfg.second_stage.n_lambda = k;
    }
    if let Some(g) = flags.ebic_gamma {
        if !(0.0..=1.0).contains(&g) {
            return Err(R2iveError::Input("--ebic-gamma must lie in [0, 1]".into()));
        }
        cfg.first_stage.ebic_gamma = g;
        cfg.second_stage.ebic_gamma = g;
    }
    if let Some(t) = flags.tau_mode {
        cfg.second_stage.tau_mode = t;
    }
    Ok(cfg)
}

fn resolve_schema(flags: &SchemaArgs, file: &FileConfig, command: &str) -> Result<(PathBuf, ColumnSchema)> {
    let missing = |what: &str| R2iveError::Input(format!("{command} requires --{what}"));
    let input = flags.input.clone().or_else(|| file.input.clone()).ok_or_else(|| missing("input"))?;
    let schema = ColumnSchema {
        outcome: flags.outcome.clone().or_else(|| file.outcome.clone()).ok_or_else(|| missing("outcome"))?,
        treatment: flags
            .treatment
            .clone()
            .or_else(|| file.treatment.clone())
            .ok_or_else(|| missing("treatment"))?,
        instruments: flags
            .instruments
            .clone()
            .or_else(|| file.instruments.clone())
            .ok_or_else(|| missing("instruments"))?,
        exogenous: flags.exogenous.clone().or_else(|| file.exogenous.clone()).unwrap_or_default(),
    };
    Ok((input, schema))
}

fn unknown_preset(name: &str) -> R2iveError {
    R2iveError::Config(format!("unknown preset `{name}`; available presets: {}", PRESETS.join(", ")))
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorTag>> {
    let mut tags = Vec::new();
    for name in names {
        let tag = EstimatorTag::parse(name).ok_or_else(|| {
            let known: Vec<&str> = EstimatorTag::ALL.iter().map(|t| t.name()).collect();
            R2iveError::Input(format!("unknown estimator `{name}`; available: {}", known.join(", ")))
        })?;
        if !tags.contains(&tag) {
            tags.push(tag);
        }
    }
    if tags.is_empty() {
        return Err(R2iveError::Input("no estimators requested".into()));
    }
    tags.sort();
    Ok(tags)
}

fn resolve_simulation(a: &SimulateArgs, file: &FileConfig) -> Result<SimConfig> {
    let preset = a.preset.as_ref().or(file.preset.as_ref());
    let mut sim = match preset {
        Some(name) => SimConfig::preset(name).ok_or_else(|| unknown_preset(name))?,
        None => {
            let need = |flag: Option<usize>, key: Option<usize>, what: &str| {
                flag.or(key)
                    .ok_or_else(|| R2iveError::Input(format!("simulate requires --preset or --{what}")))
            };
            SimConfig::new(
                need(a.n, file.n, "n")?,
                need(a.l, file.l, "L")?,
                need(a.s1, file.s1, "s1")?,
                0,
                0,
                Model::Linear,
            )
        }
    };
    // explicit fields refine the preset
    macro_rules! refine {
        ($field:ident, $flag:expr, $key:expr) => {
            if let Some(v) = $flag.or($key) {
                sim.$field = v;
            }
        };
    }
    refine!(n, a.n, file.n);
    refine!(l, a.l, file.l);
    refine!(s1, a.s1, file.s1);
    refine!(s2, a.s2, file.s2);
    refine!(q, a.q, file.q);
    refine!(model, a.model, file.model);
    refine!(reps, a.reps, file.reps);
    refine!(seed, a.seed, file.seed);
    refine!(beta_star, None, file.beta_star);
    refine!(rho, None, file.rho);
    refine!(error_corr, None, file.error_corr);
    Ok(sim)
}

impl RunConfig {
    /// Merges flags, the optional config file and defaults, and checks that
    /// each command has what it needs.
    pub fn resolve(command: &Command) -> Result<Self> {
        match command {
            Command::Estimate(a) => {
                let file = load_file(&a.output)?;
                let (input, schema) = resolve_schema(&a.schema, &file, "estimate")?;
                Ok(RunConfig::Estimate {
                    input,
                    schema,
                    tuning: resolve_tuning(&a.tuning, &file)?,
                    format: a.output.format.or(file.format).unwrap_or_default(),
                    output: a.output.output.clone().or(file.output),
                })
            }
            Command::Baselines(a) => {
                let file = load_file(&a.output)?;
                let (input, schema) = resolve_schema(&a.schema, &file, "baselines")?;
                let relevant = a.oracle_relevant.clone().or_else(|| file.oracle_relevant.clone());
                let valid = a.oracle_valid.clone().or_else(|| file.oracle_valid.clone());
                let oracle = match (relevant, valid) {
                    (Some(r), Some(v)) => Some((r, v)),
                    (None, None) => None,
                    _ => {
                        return Err(R2iveError::Input(
                            "--oracle-relevant and --oracle-valid must be given together".into(),
                        ))
                    }
                };
                Ok(RunConfig::Baselines {
                    input,
                    schema,
                    oracle,
                    tuning: resolve_tuning(&a.tuning, &file)?,
                    format: a.output.format.or(file.format).unwrap_or_default(),
                    output: a.output.output.clone().or(file.output),
                })
            }
            Command::Simulate(a) => {
                let file = load_file(&a.output)?;
                let sim = resolve_simulation(a, &file)?;
                let estimators = match a.estimators.as_ref().or(file.estimators.as_ref()) {
                    Some(names) => parse_estimators(names)?,
                    None => EstimatorTag::ALL.to_vec(),
                };
                let workers = a
                    .workers
                    .or(file.workers)
                    .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
                if workers == 0 {
                    return Err(R2iveError::Input("--workers must be at least 1".into()));
                }
                Ok(RunConfig::Simulate {
                    sim,
                    estimators,
                    workers,
                    tuning: resolve_tuning(&a.tuning, &file)?,
                    format: a.output.format.or(file.format).unwrap_or_default(),
                    output: a.output.output.clone().or(file.output),
                    replications_out: a.replications_out.clone().or(file.replications_out),
                })
            }
        }
    }
}

/// Text for stdout plus non-fatal warnings for stderr.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    pub warnings: Vec<String>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| R2iveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| R2iveError::Input(format!("cannot serialize result: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn list(names: &[String]) -> String {
    if names.is_empty() {
        "(none)".to_string()
    } else {
        names.join(" ")
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"))
}

fn estimate_rows(r: &R2iveResult) -> Vec<(&'static str, String)> {
    let t = &r.tuning;
    vec![
        ("beta_hat", format!("{:.6}", r.beta_hat)),
        ("se_homoscedastic", format!("{:.6}", r.se_homoscedastic)),
        ("se_heteroscedastic", format!("{:.6}", r.se_heteroscedastic)),
        ("n", r.n.to_string()),
        ("instruments", r.num_instruments.to_string()),
        ("relevant", list(&r.relevant_names)),
        ("invalid", list(&r.invalid_names)),
        ("basis_dim", t.basis_dim.to_string()),
        ("first_stage_criterion", format!("{:?}", t.first_stage_criterion)),
        ("lambda_first_pilot", format!("{:.6e}", t.lambda_first_pilot)),
        ("lambda_first_adaptive", format!("{:.6e}", t.lambda_first_adaptive)),
        (
            "second_stage_criterion",
            t.second_stage_criterion.map_or_else(|| "-".to_string(), |c| format!("{c:?}")),
        ),
        ("lambda2", opt_num(t.lambda2)),
        ("lambda1_pilot", opt_num(t.lambda1)),
        ("lambda1_adaptive", opt_num(t.lambda1_adaptive)),
        ("tau", t.tau.map_or_else(|| "-".to_string(), |v| v.to_string())),
    ]
}

fn render_estimate(r: &R2iveResult, style: ReportStyle) -> Result<String> {
    let rows = estimate_rows(r);
    match style {
        ReportStyle::Json => to_json(r),
        ReportStyle::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["quantity", "value"])?;
            for (k, v) in &rows {
                w.write_record([*k, v.as_str()])?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| R2iveError::Input(format!("cannot flush csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportStyle::Markdown => {
            let mut out = String::from("| quantity | value |\n|---|---|\n");
            for (k, v) in &rows {
                let _ = writeln!(out, "| {k} | {v} |");
            }
            Ok(out)
        }
    }
}

fn render_baselines(results: &[BaselineResult], names: &[String], style: ReportStyle) -> Result<String> {
    let set = |s: &Option<Vec<usize>>| {
        s.as_ref()
            .map_or_else(|| "-".to_string(), |idx| list(&idx.iter().map(|&j| names[j].clone()).collect::<Vec<_>>()))
    };
    let rows: Vec<[String; 5]> = results
        .iter()
        .map(|b| {
            [
                b.estimator.name().to_string(),
                format!("{:.6}", b.beta_hat),
                b.se.map_or_else(|| "-".to_string(), |s| format!("{s:.6}")),
                set(&b.relevant_set),
                set(&b.invalid_set),
            ]
        })
        .collect();
    let header = ["estimator", "beta_hat", "se", "relevant", "invalid"];
    match style {
        ReportStyle::Json => to_json(&results),
        ReportStyle::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(header)?;
            for r in &rows {
                w.write_record(r)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| R2iveError::Input(format!("cannot flush csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportStyle::Markdown => {
            let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
            for r in &rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
            Ok(out)
        }
    }
}

/// Maps instrument names or glob patterns to column positions.
fn resolve_instruments(ds: &Dataset, entries: &[String], flag: &str) -> Result<Vec<usize>> {
    let names = ds.instrument_names();
    let mut out = Vec::new();
    for entry in entries {
        let pattern = glob::Pattern::new(entry)
            .map_err(|e| R2iveError::Input(format!("{flag}: invalid pattern `{entry}`: {e}")))?;
        let hits: Vec<usize> = (0..names.len()).filter(|&j| pattern.matches(&names[j])).collect();
        if hits.is_empty() {
            return Err(R2iveError::Input(format!("{flag}: `{entry}` matches no instrument")));
        }
        out.extend(hits);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Executes a resolved configuration.
pub fn execute(run: &RunConfig) -> Result<Outcome> {
    match run {
        RunConfig::Estimate {
            input,
            schema,
            tuning,
            format,
            output,
        } => {
            let ds = load_csv(input, schema)?;
            let result = r2ive_fit(&ds, tuning)?;
            if let Some(path) = output {
                write_file(path, &to_json(&result)?)?;
            }
            Ok(Outcome {
                stdout: render_estimate(&result, *format)?,
                warnings: result.diagnostics.warnings.clone(),
            })
        }
        RunConfig::Baselines {
            input,
            schema,
            oracle,
            tuning,
            format,
            output,
        } => {
            let ds = load_csv(input, schema)?;
            let oracle = match oracle {
                Some((r, v)) => Some(OracleSets {
                    relevant: resolve_instruments(&ds, r, "--oracle-relevant")?,
                    valid: resolve_instruments(&ds, v, "--oracle-valid")?,
                }),
                None => None,
            };
            let results = baselines(&ds, oracle.as_ref(), tuning)?;
            let text = render_baselines(&results, ds.instrument_names(), *format)?;
            if let Some(path) = output {
                write_file(path, &text)?;
            }
            Ok(Outcome {
                stdout: text,
                warnings: Vec::new(),
            })
        }
        RunConfig::Simulate {
            sim,
            estimators,
            workers,
            tuning,
            format,
            output,
            replications_out,
        } => {
            let report = run_monte_carlo(sim, estimators, tuning, *workers)?;
            let text = format_report(&report, *format)?;
            if let Some(path) = output {
                write_file(path, &text)?;
            }
            if let Some(path) = replications_out {
                write_replications(&report, path)?;
            }
            Ok(Outcome {
                stdout: text,
                warnings: report.warnings.clone(),
            })
        }
    }
}

/// Parses already-split arguments, resolves and executes them.
pub fn run(cli: &Cli) -> Result<Outcome> {
    execute(&RunConfig::resolve(&cli.command)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("r2ive").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn undocumented_flags_are_rejected() {
        assert!(Cli::try_parse_from(["r2ive", "simulate", "--bogus", "1"]).is_err());
    }

    #[test]
    fn preset_is_refined_by_flags() {
        let run = RunConfig::resolve(&parse(&["simulate", "--preset", "linear-s2-10", "--reps", "3", "--seed", "9", "--workers", "1"])).unwrap();
        let RunConfig::Simulate { sim, workers, .. } = run else { panic!("wrong command") };
        let mut want = SimConfig::preset("linear-s2-10").unwrap();
        want.reps = 3;
        want.seed = 9;
        assert_eq!(sim, want);
        assert_eq!(workers, 1);
    }

    #[test]
    fn unknown_preset_lists_the_names() {
        let err = RunConfig::resolve(&parse(&["simulate", "--preset", "nope"])).unwrap_err();
        let msg = err.to_string();
        for p in PRESETS {
            assert!(msg.contains(p), "{msg}");
        }
    }

    #[test]
    fn custom_design_needs_its_dimensions() {
        assert!(RunConfig::resolve(&parse(&["simulate", "--n", "100"])).is_err());
        let run = RunConfig::resolve(&parse(&["simulate", "--n", "100", "--L", "10", "--s1", "3", "--s2", "2", "--model", "nonlinear"])).unwrap();
        let RunConfig::Simulate { sim, .. } = run else { panic!("wrong command") };
        assert_eq!((sim.n, sim.l, sim.s1, sim.s2, sim.q, sim.model), (100, 10, 3, 2, 0, Model::Nonlinear));
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "input = \"a.csv\"\noutcome = \"y\"\ntreatment = \"d\"\ninstruments = [\"z*\"]\nformat = \"json\"\n\
             [tuning.first_stage]\ndegree = 2\nebic_gamma = 0.5\n[tuning.second_stage]\ntau_mode = \"body\"\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let run = RunConfig::resolve(&parse(&["estimate", "--config", p, "--outcome", "yy", "--ebic-gamma", "0.25"])).unwrap();
        let RunConfig::Estimate { input, schema, tuning, format, .. } = run else { panic!("wrong command") };
        assert_eq!(input, PathBuf::from("a.csv"));
        assert_eq!(schema.outcome, "yy");
        assert_eq!(schema.instruments, vec!["z*".to_string()]);
        assert_eq!(format, ReportStyle::Json);
        assert_eq!(tuning.first_stage.degree, 2);
        assert_eq!(tuning.first_stage.ebic_gamma, 0.25);
        assert_eq!(tuning.second_stage.ebic_gamma, 0.25);
        assert_eq!(tuning.second_stage.tau_mode, TauMode::Body);
        assert_eq!(tuning.second_stage.n_lambda, R2iveConfig::default().second_stage.n_lambda);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "inptu = \"a.csv\"\n").unwrap();
        let err = RunConfig::resolve(&parse(&["estimate", "--config", path.to_str().unwrap()])).unwrap_err();
        assert!(!err.to_string().contains('\n'));
    }

    #[test]
    fn estimate_requires_input() {
        let err = RunConfig::resolve(&parse(&["estimate", "--outcome", "y"])).unwrap_err();
        assert!(err.to_string().contains("--input"));
    }

    #[test]
    fn estimator_names_parse() {
        let tags = parse_estimators(&["r2ive".into(), "2sls".into(), "R2IVE".into()]).unwrap();
        assert_eq!(tags, vec![EstimatorTag::Tsls, EstimatorTag::R2ive]);
        assert!(parse_estimators(&["lasso".into()]).is_err());
    }
}
