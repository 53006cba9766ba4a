//! Data-generating processes and the Monte Carlo harness.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{R2iveError, Result};
use crate::estimator::{fit_estimators, EstimatorTag, OracleSets, R2iveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// `D = Z gamma + xi` with a cut-off coefficient vector.
    Linear,
    /// Additive quadratic and sine components in the leading instruments.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub s1: usize,
    pub s2: usize,
    pub q: usize,
    pub model: Model,
    pub beta_star: f64,
    pub rho: f64,
    pub error_corr: f64,
    pub reps: usize,
    pub seed: u64,
}

/// Named rows of the simulation design.
pub const PRESETS: [&str; 13] = [
    "linear-s2-0",
    "linear-s2-10",
    "linear-s2-30",
    "linear-s1-4",
    "linear-s1-10",
    "linear-s1-20",
    "linear-n200",
    "linear-n500",
    "linear-n1000",
    "nonlinear-s2-0",
    "nonlinear-s2-20-n200",
    "nonlinear-s2-20",
    "nonlinear-s1-12",
];

impl SimConfig {
    pub fn new(n: usize, l: usize, s1: usize, s2: usize, q: usize, model: Model) -> Self {
        Self {
            n,
            l,
            s1,
            s2,
            q,
            model,
            beta_star: 0.75,
            rho: 0.5,
            error_corr: 0.8,
            reps: 1000,
            seed: 20_240_601,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        use Model::{Linear, Nonlinear};
        let cfg = match name {
            "linear-s2-0" => Self::new(200, 100, 10, 0, 10, Linear),
            "linear-s2-10" => Self::new(200, 100, 10, 10, 7, Linear),
            "linear-s2-30" | "linear-s1-10" => Self::new(200, 100, 10, 30, 7, Linear),
            "linear-s1-4" => Self::new(200, 100, 4, 30, 2, Linear),
            "linear-s1-20" => Self::new(200, 100, 20, 30, 14, Linear),
            "linear-n200" => Self::new(200, 100, 20, 20, 14, Linear),
            "linear-n500" => Self::new(500, 100, 20, 20, 14, Linear),
            "linear-n1000" => Self::new(1000, 100, 20, 20, 14, Linear),
            "nonlinear-s2-0" => Self::new(500, 100, 4, 0, 4, Nonlinear),
            "nonlinear-s2-20-n200" => Self::new(200, 100, 4, 20, 2, Nonlinear),
            "nonlinear-s2-20" => Self::new(500, 100, 4, 20, 2, Nonlinear),
            "nonlinear-s1-12" => Self::new(500, 100, 12, 20, 9, Nonlinear),
            _ => return None,
        };
        Some(cfg)
    }

    /// Checks hard constraints; returns warnings for soft ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |msg: String| Err(R2iveError::Config(msg));
        if self.n < 2 {
            return bad(format!("n = {} is below 2", self.n));
        }
        if self.l == 0 {
            return bad("L must be positive".into());
        }
        if self.s1 == 0 || self.s1 > self.l {
            return bad(format!("s1 = {} must lie in 1..={}", self.s1, self.l));
        }
        if self.q + self.s2 > self.l {
            return bad(format!("q + s2 = {} exceeds L = {}", self.q + self.s2, self.l));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if !(self.rho.abs() < 1.0) || !(self.error_corr.abs() <= 1.0) || !self.beta_star.is_finite() {
            return bad("rho must lie in (-1, 1) and error_corr in [-1, 1]".into());
        }
        let mut warnings = Vec::new();
        if 2 * self.s2 >= self.l {
            warnings.push(format!(
                "s2 = {} is not below L/2; the effect may not be identified",
                self.s2
            ));
        }
        Ok(warnings)
    }

    /// Sizes of the four instrument classes: relevant valid, relevant invalid,
    /// irrelevant valid, irrelevant invalid.
    pub fn partition(&self) -> [usize; 4] {
        let truth = Truth::for_config(self);
        let rel = |j: &usize| truth.relevant.contains(j);
        let inv = |j: &usize| truth.invalid.contains(j);
        let all: Vec<usize> = (0..self.l).collect();
        [
            all.iter().filter(|j| rel(j) && !inv(j)).count(),
            all.iter().filter(|j| rel(j) && inv(j)).count(),
            all.iter().filter(|j| !rel(j) && !inv(j)).count(),
            all.iter().filter(|j| !rel(j) && inv(j)).count(),
        ]
    }
}

/// True instrument roles of a simulated design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub relevant: Vec<usize>,
    pub invalid: Vec<usize>,
    pub beta_star: f64,
}

impl Truth {
    pub fn for_config(cfg: &SimConfig) -> Self {
        Self {
            relevant: (0..cfg.s1).collect(),
            invalid: (cfg.q..cfg.q + cfg.s2).collect(),
            beta_star: cfg.beta_star,
        }
    }

    pub fn oracle_sets(&self, l: usize) -> OracleSets {
        OracleSets {
            relevant: self.relevant.clone(),
            valid: (0..l).filter(|j| !self.invalid.contains(j)).collect(),
        }
    }
}

const LINEAR_PATTERN: [f64; 4] = [2.0, 0.75, 1.5, 1.0];

/// First-stage coefficients of the linear design: the pattern repeated over
/// the first `s1` instruments.
pub fn linear_gamma(l: usize, s1: usize) -> Vec<f64> {
    (0..l)
        .map(|j| if j < s1 { LINEAR_PATTERN[j % 4] } else { 0.0 })
        .collect()
}

fn nonlinear_component(j: usize, z: f64) -> f64 {
    match j % 4 {
        0 => 2.0 * z * z,
        1 => 0.75 * z * z,
        2 => 1.5 * z * z,
        _ => 3.0 * (std::f64::consts::PI * z).sin(),
    }
}

/// Per-replication generator: stream `rep` of the generator seeded by `seed`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Cholesky factor of the AR(1)-type correlation `rho^|j-k|`.
fn correlation_factor(l: usize, rho: f64) -> DMatrix<f64> {
    let sigma = DMatrix::from_fn(l, l, |j, k| rho.powi((j as i32 - k as i32).abs()));
    sigma
        .cholesky()
        .expect("correlation matrix with |rho| < 1 is positive definite")
        .l()
}

/// Draws one dataset of the design with its true instrument roles.
pub fn generate_dataset(cfg: &SimConfig, rep: u64) -> Result<(Dataset, Truth)> {
    cfg.validate()?;
    let (n, l) = (cfg.n, cfg.l);
    let chol = correlation_factor(l, cfg.rho);
    let mut rng = replication_rng(cfg.seed, rep);
    let mut g = DMatrix::zeros(n, l);
    let mut e1 = DVector::zeros(n);
    let mut e2 = DVector::zeros(n);
    for i in 0..n {
        for j in 0..l {
            g[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
        e1[i] = rng.sample::<f64, _>(StandardNormal);
        e2[i] = rng.sample::<f64, _>(StandardNormal);
    }
    let z = g * chol.transpose();
    let eps = e1.clone();
    let c = cfg.error_corr;
    let xi = &e1 * c + &e2 * (1.0 - c * c).sqrt();

    let truth = Truth::for_config(cfg);
    let d = match cfg.model {
        Model::Linear => &z * DVector::from_vec(linear_gamma(l, cfg.s1)) + &xi,
        Model::Nonlinear => DVector::from_fn(n, |i, _| {
            (0..cfg.s1).map(|j| nonlinear_component(j, z[(i, j)])).sum::<f64>() + xi[i]
        }),
    };
    let mut y = &d * cfg.beta_star + eps;
    for &j in &truth.invalid {
        y += z.column(j);
    }
    Ok((Dataset::new(y, d, z, None)?, truth))
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub estimator: EstimatorTag,
    pub beta_hat: Option<f64>,
    pub se: Option<f64>,
    pub relevant_count: Option<usize>,
    pub invalid_count: Option<usize>,
    pub captured_relevant: Option<usize>,
    pub captured_invalid: Option<usize>,
    pub exact_invalid: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub mean: f64,
    /// Lower median of the set sizes.
    pub median: usize,
    pub max: usize,
    pub min: usize,
    /// Mean fraction of the true instruments of that kind that were captured;
    /// `None` when there are none.
    pub freq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorTag,
    pub reps_ok: usize,
    pub failures: usize,
    pub bias: f64,
    /// Sample standard deviation of the estimates; 0 with `std_dev_defined`
    /// false when fewer than two replications succeeded.
    pub std_dev: f64,
    pub std_dev_defined: bool,
    pub mse: f64,
    pub relevant: Option<SelectionStats>,
    pub invalid: Option<SelectionStats>,
    /// Share of replications with the invalid set recovered exactly.
    pub exact_invalid_rate: Option<f64>,
    /// Share of replications whose 95% interval covers the true effect.
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
}

impl EstimatorSummary {
    /// The selection statistics shown in the table: invalid-instrument
    /// selection when the estimator makes one, relevance selection otherwise.
    pub fn headline_selection(&self) -> Option<&SelectionStats> {
        self.invalid.as_ref().or(self.relevant.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimConfig,
    pub warnings: Vec<String>,
    pub estimators: Vec<EstimatorSummary>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

impl SimulationReport {
    /// The report a run with only the first `reps` replications would give.
    pub fn truncated(&self, reps: usize) -> Result<SimulationReport> {
        let reps = reps.min(self.config.reps);
        let config = SimConfig { reps, ..self.config.clone() };
        let tags: Vec<EstimatorTag> = self.estimators.iter().map(|e| e.estimator).collect();
        let records: Vec<ReplicationRecord> =
            self.records.iter().filter(|r| r.rep < reps).cloned().collect();
        summarize(&config, &tags, records, self.warnings.clone())
    }

    pub fn summary(&self, tag: EstimatorTag) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == tag)
    }
}

fn selection_stats(counts: &[usize], captured: &[usize], truth_size: usize) -> SelectionStats {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let k = sorted.len();
    SelectionStats {
        mean: sorted.iter().sum::<usize>() as f64 / k as f64,
        median: sorted[(k - 1) / 2],
        max: sorted[k - 1],
        min: sorted[0],
        freq: (truth_size > 0).then(|| {
            captured.iter().map(|&c| c as f64 / truth_size as f64).sum::<f64>() / k as f64
        }),
    }
}

fn summarize(
    cfg: &SimConfig,
    tags: &[EstimatorTag],
    mut records: Vec<ReplicationRecord>,
    warnings: Vec<String>,
) -> Result<SimulationReport> {
    records.sort_by_key(|r| (r.rep, tags.iter().position(|t| *t == r.estimator)));
    let truth = Truth::for_config(cfg);
    let mut estimators = Vec::with_capacity(tags.len());
    for &tag in tags {
        let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == tag).collect();
        let ok: Vec<&ReplicationRecord> = rows.iter().copied().filter(|r| r.beta_hat.is_some()).collect();
        let failures = rows.len() - ok.len();
        if failures * 20 > cfg.reps {
            return Err(R2iveError::Harness {
                failures,
                reps: cfg.reps,
            });
        }
        if ok.is_empty() {
            return Err(R2iveError::Harness {
                failures,
                reps: cfg.reps,
            });
        }
        let m = ok.len() as f64;
        let errs: Vec<f64> = ok.iter().map(|r| r.beta_hat.unwrap() - cfg.beta_star).collect();
        let bias = errs.iter().sum::<f64>() / m;
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / m;
        let (std_dev, std_dev_defined) = if ok.len() > 1 {
            let var = errs.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / (m - 1.0);
            (var.sqrt(), true)
        } else {
            (0.0, false)
        };
        let pick = |f: fn(&ReplicationRecord) -> Option<usize>| -> Option<Vec<usize>> {
            ok.iter().map(|r| f(r)).collect()
        };
        let relevant = pick(|r| r.relevant_count).zip(pick(|r| r.captured_relevant)).map(
            |(c, k)| selection_stats(&c, &k, truth.relevant.len()),
        );
        let invalid = pick(|r| r.invalid_count)
            .zip(pick(|r| r.captured_invalid))
            .map(|(c, k)| selection_stats(&c, &k, truth.invalid.len()));
        let exact_invalid_rate = ok
            .iter()
            .map(|r| r.exact_invalid)
            .collect::<Option<Vec<bool>>>()
            .map(|v| v.iter().filter(|&&b| b).count() as f64 / m);
        let ses: Option<Vec<f64>> = ok.iter().map(|r| r.se).collect();
        let (coverage, mean_se) = match ses {
            Some(ses) => {
                let covered = ok
                    .iter()
                    .zip(&ses)
                    .filter(|(r, se)| (r.beta_hat.unwrap() - cfg.beta_star).abs() <= 1.96 * **se)
                    .count();
                (
                    Some(covered as f64 / m),
                    Some(ses.iter().sum::<f64>() / m),
                )
            }
            None => (None, None),
        };
        estimators.push(EstimatorSummary {
            estimator: tag,
            reps_ok: ok.len(),
            failures,
            bias,
            std_dev,
            std_dev_defined,
            mse,
            relevant,
            invalid,
            exact_invalid_rate,
            coverage,
            mean_se,
        });
    }
    Ok(SimulationReport {
        config: cfg.clone(),
        warnings,
        estimators,
        records,
    })
}

fn replicate(
    cfg: &SimConfig,
    rep: usize,
    tags: &[EstimatorTag],
    config: &R2iveConfig,
) -> Vec<ReplicationRecord> {
    let failed = |tag: EstimatorTag, msg: String| ReplicationRecord {
        rep,
        estimator: tag,
        beta_hat: None,
        se: None,
        relevant_count: None,
        invalid_count: None,
        captured_relevant: None,
        captured_invalid: None,
        exact_invalid: None,
        error: Some(msg),
    };
    let (ds, truth) = match generate_dataset(cfg, rep as u64) {
        Ok(v) => v,
        Err(e) => return tags.iter().map(|&t| failed(t, e.to_string())).collect(),
    };
    let oracle = truth.oracle_sets(cfg.l);
    let fits = match fit_estimators(&ds, tags, Some(&oracle), config) {
        Ok(f) => f,
        Err(e) => return tags.iter().map(|&t| failed(t, e.to_string())).collect(),
    };
    fits.into_iter()
        .map(|(tag, res)| match res {
            Ok(b) => {
                let count_in = |set: &Option<Vec<usize>>, target: &[usize]| {
                    set.as_ref().map(|s| s.iter().filter(|j| target.contains(j)).count())
                };
                // the oracle's sets are inputs, not selections
                let (rel, inv) = if tag == EstimatorTag::OracleTsls {
                    (None, None)
                } else {
                    (b.relevant_set.clone(), b.invalid_set.clone())
                };
                ReplicationRecord {
                    rep,
                    estimator: tag,
                    beta_hat: Some(b.beta_hat),
                    se: b.se,
                    relevant_count: rel.as_ref().map(|s| s.len()),
                    invalid_count: inv.as_ref().map(|s| s.len()),
                    captured_relevant: count_in(&rel, &truth.relevant),
                    captured_invalid: count_in(&inv, &truth.invalid),
                    exact_invalid: inv.as_ref().map(|s| {
                        let mut s = s.clone();
                        s.sort_unstable();
                        s == truth.invalid
                    }),
                    error: None,
                }
            }
            Err(e) => failed(tag, e.to_string()),
        })
        .collect()
}

/// Runs `cfg.reps` replications of every estimator in `tags` on `workers`
/// threads. Replication `r` depends only on `(cfg.seed, r)`.
pub fn run_monte_carlo(
    cfg: &SimConfig,
    tags: &[EstimatorTag],
    config: &R2iveConfig,
    workers: usize,
) -> Result<SimulationReport> {
    let warnings = cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| R2iveError::Config(format!("cannot start worker pool: {e}")))?;
    let per_rep: Vec<Vec<ReplicationRecord>> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| replicate(cfg, rep, tags, config))
            .collect()
    });
    summarize(cfg, tags, per_rep.into_iter().flatten().collect(), warnings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReportStyle {
    #[default]
    Markdown,
    Csv,
    Json,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "estimator", "bias", "std_dev", "mse", "mean", "median", "max", "min", "freq",
];

fn report_cells(e: &EstimatorSummary) -> Vec<String> {
    let mut cells = vec![
        e.estimator.name().to_string(),
        format!("{:.4}", e.bias),
        format!("{:.4}", e.std_dev),
        format!("{:.4}", e.mse),
    ];
    match e.headline_selection() {
        Some(s) => {
            cells.push(format!("{:.2}", s.mean));
            cells.push(s.median.to_string());
            cells.push(s.max.to_string());
            cells.push(s.min.to_string());
            cells.push(match s.freq {
                Some(f) => {
                    let t = format!("{f:.3}");
                    t.trim_end_matches('0').trim_end_matches('.').to_string()
                }
                None => "-".to_string(),
            });
        }
        None => cells.extend(std::iter::repeat_n(String::new(), 5)),
    }
    cells
}

/// Renders the per-estimator table. Identical reports render to identical
/// bytes.
pub fn format_report(report: &SimulationReport, style: ReportStyle) -> Result<String> {
    let mut out = String::new();
    match style {
        ReportStyle::Json => {
            out = serde_json::to_string_pretty(report)
                .map_err(|e| R2iveError::Input(format!("cannot serialize report: {e}")))?;
            out.push('\n');
        }
        ReportStyle::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS)?;
            for e in &report.estimators {
                w.write_record(report_cells(e))?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| R2iveError::Input(format!("cannot flush csv: {e}")))?;
            out = String::from_utf8(bytes).expect("csv output is utf-8");
        }
        ReportStyle::Markdown => {
            let c = &report.config;
            let _ = writeln!(
                out,
                "model={:?} n={} L={} s1={} s2={} q={} reps={} seed={}",
                c.model, c.n, c.l, c.s1, c.s2, c.q, c.reps, c.seed
            );
            let _ = writeln!(out);
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for e in &report.estimators {
                let _ = writeln!(out, "| {} |", report_cells(e).join(" | "));
            }
            for e in report.estimators.iter().filter(|e| e.failures > 0) {
                let _ = writeln!(out, "\n{}: {} failed replications excluded", e.estimator, e.failures);
            }
            for w in &report.warnings {
                let _ = writeln!(out, "\nwarning: {w}");
            }
        }
    }
    Ok(out)
}

/// Writes one CSV row per (replication, estimator).
pub fn write_replications(report: &SimulationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "rep",
        "estimator",
        "beta_hat",
        "se",
        "relevant_count",
        "invalid_count",
        "captured_relevant",
        "captured_invalid",
        "error",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &report.records {
        w.write_record([
            r.rep.to_string(),
            r.estimator.name().to_string(),
            opt(r.beta_hat.map(|v| format!("{v:?}"))),
            opt(r.se.map(|v| format!("{v:?}"))),
            opt(r.relevant_count.map(|v| v.to_string())),
            opt(r.invalid_count.map(|v| v.to_string())),
            opt(r.captured_relevant.map(|v| v.to_string())),
            opt(r.captured_invalid.map(|v| v.to_string())),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| R2iveError::Io {
        path: path.to_path_buf(),
        source,
    })
}
