//! The three-step estimator, its standard errors, and the comparison
//! estimators.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{residualize, CenteredDataset, Dataset, Residualization};
use crate::elasticnet::{select_invalid, EnetProblem, SecondStageConfig};
use crate::error::{R2iveError, Result};
use crate::grouplasso::{tune_first_stage, FirstStageConfig, FirstStageResult};
use crate::ic::{argmin_prefer_first, log_grid, Criterion};
use crate::linalg::{dot, least_squares, ColumnSpace, RANK_TOL};
use crate::splines::{assemble_design, default_basis_grid, SplineSpec};

/// Applies `I - d d' / ||d||^2` to `y` and to every column of `z`.
pub fn annihilator_transform(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    d_hat: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = d_hat.len();
    if y.len() != n || z.nrows() != n {
        return Err(R2iveError::Dimension("annihilator inputs differ in length".into()));
    }
    let dd = d_hat.norm_squared();
    if !(dd > 0.0) {
        return Err(R2iveError::DegenerateFirstStage(
            "fitted instrument is identically zero; no relevant instrument was found".into(),
        ));
    }
    let remove = |v: &mut [f64]| {
        let c = dot(d_hat.as_slice(), v) / dd;
        for (vi, di) in v.iter_mut().zip(d_hat.iter()) {
            *vi -= c * di;
        }
    };
    let mut yt = y.clone();
    remove(yt.as_mut_slice());
    let mut zt = z.clone();
    for j in 0..zt.ncols() {
        remove(zt.column_mut(j).as_mut_slice());
    }
    Ok((yt, zt))
}

/// Least-squares step with the selected invalid instruments as covariates.
#[derive(Debug, Clone)]
pub struct PostFit {
    pub beta: f64,
    /// Coefficients on the covariate columns.
    pub alpha: Vec<f64>,
    pub residuals: DVector<f64>,
    /// The fitted instrument with the covariates partialled out.
    pub partialled: DVector<f64>,
    /// `|beta - beta_joint|` between the partialled-out formula and the joint
    /// regression.
    pub route_gap: f64,
}

impl PostFit {
    /// Replaces the second-step residuals with the structural residuals
    /// `y - d beta - covariates alpha`, which estimate the outcome error
    /// rather than that error plus `beta` times the first-stage error.
    pub fn with_structural_residuals(mut self, y: &DVector<f64>, d: &DVector<f64>, covariates: &DMatrix<f64>) -> Self {
        let mut v = y - d * self.beta;
        if covariates.ncols() > 0 {
            v -= covariates * DVector::from_column_slice(&self.alpha);
        }
        self.residuals = v;
        self
    }
}

/// `beta = (d' M d)^-1 d' M y` with `M` the annihilator of `covariates`.
/// `names` label the covariate columns in collinearity errors.
pub fn beta_post(
    y: &DVector<f64>,
    d_hat: &DVector<f64>,
    covariates: &DMatrix<f64>,
    names: &[String],
) -> Result<PostFit> {
    let n = y.len();
    let k = covariates.ncols();
    if d_hat.len() != n || covariates.nrows() != n {
        return Err(R2iveError::Dimension("post-selection inputs differ in length".into()));
    }
    if n <= k + 1 {
        return Err(R2iveError::Dimension(format!(
            "{n} observations cannot support {k} covariates plus the treatment"
        )));
    }
    let label = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("column {j}"));
    let space = ColumnSpace::new(covariates);
    if !space.is_full_rank() {
        return Err(R2iveError::Collinear {
            columns: space.dependent_columns().iter().map(|&j| label(j)).collect(),
        });
    }
    let w = space.annihilate(d_hat.as_slice());
    let ww = w.norm_squared();
    if !(ww > (RANK_TOL * d_hat.norm()).powi(2)) {
        let mut columns = vec!["fitted instrument".to_string()];
        columns.extend((0..k).map(label));
        return Err(R2iveError::Collinear { columns });
    }
    let beta = dot(w.as_slice(), y.as_slice()) / ww;
    let partial: DVector<f64> = y - d_hat * beta;
    let residuals = space.annihilate(partial.as_slice());
    let fitted = &partial - &residuals;
    let alpha = least_squares(covariates, &fitted)
        .map(|a| a.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; k]);

    let mut joint = DMatrix::zeros(n, k + 1);
    joint.column_mut(0).copy_from(d_hat);
    if k > 0 {
        joint.columns_mut(1, k).copy_from(covariates);
    }
    let route_gap = least_squares(&joint, y)
        .map(|c| (c[0] - beta).abs())
        .unwrap_or(f64::INFINITY);
    Ok(PostFit {
        beta,
        alpha,
        residuals,
        partialled: w,
        route_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    Homoscedastic,
    Heteroscedastic,
}

/// Standard error of `beta` from a [`PostFit`] with `covariates` columns.
pub fn variance(post: &PostFit, covariates: usize, mode: VarianceMode) -> Result<f64> {
    let n = post.residuals.len();
    if n <= covariates + 1 {
        return Err(R2iveError::Dimension("too few observations for a standard error".into()));
    }
    let nf = n as f64;
    let q = post.partialled.norm_squared() / nf;
    if !(q > 0.0) {
        return Err(R2iveError::SingularDesign(
            "fitted instrument has no variation left after partialling out".into(),
        ));
    }
    let sigma2 = match mode {
        VarianceMode::Homoscedastic => {
            let s2 = post.residuals.norm_squared() / (n - covariates - 1) as f64;
            s2 / q
        }
        VarianceMode::Heteroscedastic => {
            let meat: f64 = post
                .partialled
                .iter()
                .zip(post.residuals.iter())
                .map(|(w, v)| w * w * v * v)
                .sum::<f64>()
                / nf;
            meat / (q * q)
        }
    };
    Ok((sigma2 / nf).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct R2iveConfig {
    pub first_stage: FirstStageConfig,
    pub second_stage: SecondStageConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tuning {
    pub basis_dim: usize,
    pub lambda_first_pilot: f64,
    pub lambda_first_adaptive: f64,
    pub lambda2: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda1_adaptive: Option<f64>,
    pub tau: Option<f64>,
    pub first_stage_criterion: Criterion,
    pub second_stage_criterion: Option<Criterion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub first_stage_converged: bool,
    pub second_stage_converged: bool,
    /// Disagreement between the two routes to the treatment coefficient.
    pub beta_route_gap: f64,
    pub degenerate_instruments: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct R2iveResult {
    pub beta_hat: f64,
    pub se_homoscedastic: f64,
    pub se_heteroscedastic: f64,
    pub relevant_set: Vec<usize>,
    pub relevant_names: Vec<String>,
    pub invalid_set: Vec<usize>,
    pub invalid_names: Vec<String>,
    pub d_hat: Vec<f64>,
    /// Length L; zero outside the invalid set.
    pub alpha_hat: Vec<f64>,
    pub tuning: Tuning,
    pub diagnostics: Diagnostics,
    pub n: usize,
    pub num_instruments: usize,
    pub residualization: Residualization,
}

fn select_columns(z: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), cols.len(), |i, k| z[(i, cols[k])])
}

fn names_of(names: &[String], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&j| names[j].clone()).collect()
}

/// Runs the full pipeline on raw data.
pub fn r2ive_fit(ds: &Dataset, config: &R2iveConfig) -> Result<R2iveResult> {
    let cds = residualize(ds)?;
    let fs = tune_first_stage(cds.d.as_slice(), &cds, &config.first_stage)?;
    r2ive_from_first_stage(&cds, &fs, config)
}

/// Steps two and three given a tuned first stage.
pub fn r2ive_from_first_stage(
    cds: &CenteredDataset,
    fs: &FirstStageResult,
    config: &R2iveConfig,
) -> Result<R2iveResult> {
    let l = cds.num_instruments();
    let (yt, zt) = annihilator_transform(&cds.y, &cds.z, &fs.d_hat)?;
    let mut warnings = Vec::new();
    let (invalid_set, selection) = if l == 1 {
        warnings.push(
            "only one instrument: invalid-instrument selection is vacuous and it is treated as valid"
                .to_string(),
        );
        (Vec::new(), None)
    } else {
        let sel = select_invalid(&yt, &zt, &config.second_stage)?;
        warnings.extend(sel.warnings.iter().cloned());
        (sel.invalid_set.clone(), Some(sel))
    };
    let zi = select_columns(&cds.z, &invalid_set);
    let inames = names_of(&cds.instrument_names, &invalid_set);
    let post = beta_post(&cds.y, &fs.d_hat, &zi, &inames)?.with_structural_residuals(&cds.y, &cds.d, &zi);
    let k = invalid_set.len();
    let se_homoscedastic = variance(&post, k, VarianceMode::Homoscedastic)?;
    let se_heteroscedastic = variance(&post, k, VarianceMode::Heteroscedastic)?;
    let mut alpha_hat = vec![0.0; l];
    for (a, &j) in post.alpha.iter().zip(&invalid_set) {
        alpha_hat[j] = *a;
    }
    Ok(R2iveResult {
        beta_hat: post.beta,
        se_homoscedastic,
        se_heteroscedastic,
        relevant_names: names_of(&cds.instrument_names, &fs.relevant_set),
        relevant_set: fs.relevant_set.clone(),
        invalid_names: inames,
        invalid_set,
        d_hat: fs.d_hat.iter().copied().collect(),
        alpha_hat,
        tuning: Tuning {
            basis_dim: fs.basis_dim,
            lambda_first_pilot: fs.lambda_pilot,
            lambda_first_adaptive: fs.lambda_adaptive,
            lambda2: selection.as_ref().map(|s| s.lambda2),
            lambda1: selection.as_ref().map(|s| s.lambda1),
            lambda1_adaptive: selection.as_ref().map(|s| s.lambda1_adaptive),
            tau: selection.as_ref().map(|s| s.tau),
            first_stage_criterion: fs.criterion,
            second_stage_criterion: selection.as_ref().map(|s| s.criterion),
        },
        diagnostics: Diagnostics {
            first_stage_converged: fs.pilot.converged && fs.adaptive.converged,
            second_stage_converged: selection
                .as_ref()
                .is_none_or(|s| s.pilot.converged && s.adaptive.converged),
            beta_route_gap: post.route_gap,
            degenerate_instruments: fs
                .degenerate
                .iter()
                .map(|b| format!("{}: {}", cds.instrument_names[b.instrument], b.reason))
                .collect(),
            warnings,
        },
        n: cds.n(),
        num_instruments: l,
        residualization: cds.residualization,
    })
}

/// Estimators compared in the simulation harness and the `baselines` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorTag {
    Ols,
    Tsls,
    OracleTsls,
    Naive,
    Sisvive,
    SisvivePost,
    R2ive,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 7] = [
        EstimatorTag::Ols,
        EstimatorTag::Tsls,
        EstimatorTag::OracleTsls,
        EstimatorTag::Naive,
        EstimatorTag::Sisvive,
        EstimatorTag::SisvivePost,
        EstimatorTag::R2ive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorTag::Ols => "OLS",
            EstimatorTag::Tsls => "TSLS",
            EstimatorTag::OracleTsls => "ORACLE_TSLS",
            EstimatorTag::Naive => "NAIVE",
            EstimatorTag::Sisvive => "SISVIVE",
            EstimatorTag::SisvivePost => "SISVIVE_POST",
            EstimatorTag::R2ive => "R2IVE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = s.trim().to_ascii_uppercase().replace(['-', '.'], "_");
        let key = if key == "2SLS" { "TSLS".to_string() } else { key };
        Self::ALL.into_iter().find(|t| t.name() == key)
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Known instrument roles, used by the oracle estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSets {
    pub relevant: Vec<usize>,
    pub valid: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub estimator: EstimatorTag,
    pub beta_hat: f64,
    pub se: Option<f64>,
    pub relevant_set: Option<Vec<usize>>,
    pub invalid_set: Option<Vec<usize>>,
}

impl BaselineResult {
    fn plain(estimator: EstimatorTag, beta_hat: f64, se: Option<f64>) -> Self {
        Self {
            estimator,
            beta_hat,
            se,
            relevant_set: None,
            invalid_set: None,
        }
    }
}

impl From<&R2iveResult> for BaselineResult {
    fn from(r: &R2iveResult) -> Self {
        Self {
            estimator: EstimatorTag::R2ive,
            beta_hat: r.beta_hat,
            se: Some(r.se_heteroscedastic),
            relevant_set: Some(r.relevant_set.clone()),
            invalid_set: Some(r.invalid_set.clone()),
        }
    }
}

/// Simple IV coefficient `(x'y)/(x'd)` with homoscedastic standard error,
/// where `x` is the instrument for `d`.
fn iv_coefficient(y: &DVector<f64>, d: &DVector<f64>, x: &DVector<f64>, dof_lost: usize) -> Result<(f64, f64)> {
    let xd = x.dot(d);
    if !(xd.abs() > 0.0) {
        return Err(R2iveError::SingularDesign(
            "instrumented treatment is orthogonal to the treatment".into(),
        ));
    }
    let beta = x.dot(y) / xd;
    let n = y.len();
    let resid = y - d * beta;
    let s2 = resid.norm_squared() / n.saturating_sub(dof_lost + 1).max(1) as f64;
    let se = (s2 * x.norm_squared()).sqrt() / xd.abs();
    Ok((beta, se))
}

pub fn ols(cds: &CenteredDataset) -> Result<BaselineResult> {
    let (beta, se) = iv_coefficient(&cds.y, &cds.d, &cds.d, 0)?;
    Ok(BaselineResult::plain(EstimatorTag::Ols, beta, Some(se)))
}

/// Two-stage least squares with instruments `zs` and exogenous `covariates`.
fn tsls_with(
    y: &DVector<f64>,
    d: &DVector<f64>,
    zs: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let (y, d, zs) = if covariates.ncols() > 0 {
        let w = ColumnSpace::new(covariates);
        (w.annihilate(y.as_slice()), w.annihilate(d.as_slice()), w.annihilate_columns(zs))
    } else {
        (y.clone(), d.clone(), zs.clone())
    };
    let space = ColumnSpace::new(&zs);
    if space.rank() == 0 {
        return Err(R2iveError::SingularDesign("no usable instruments".into()));
    }
    let d_fit = space.project(d.as_slice());
    iv_coefficient(&y, &d, &d_fit, covariates.ncols())
}

pub fn tsls(cds: &CenteredDataset) -> Result<BaselineResult> {
    let (beta, se) = tsls_with(&cds.y, &cds.d, &cds.z, &DMatrix::zeros(cds.n(), 0))?;
    Ok(BaselineResult::plain(EstimatorTag::Tsls, beta, Some(se)))
}

/// Two-stage least squares using the relevant valid instruments, with the
/// invalid instruments entering the structural equation as covariates. The
/// first stage is unpenalized least squares on the instruments' additive
/// basis blocks, with the basis size chosen by BIC over the first-stage grid;
/// `m_n = 1` is the textbook linear first stage.
pub fn oracle_tsls(
    cds: &CenteredDataset,
    oracle: &OracleSets,
    first_stage: &FirstStageConfig,
) -> Result<BaselineResult> {
    let (n, l) = (cds.n(), cds.num_instruments());
    if oracle.relevant.iter().chain(&oracle.valid).any(|&j| j >= l) {
        return Err(R2iveError::Input("oracle set index out of range".into()));
    }
    let strong: Vec<usize> = oracle
        .relevant
        .iter()
        .copied()
        .filter(|j| oracle.valid.contains(j))
        .collect();
    if strong.is_empty() {
        return Err(R2iveError::Input(
            "oracle sets contain no relevant and valid instrument".into(),
        ));
    }
    let invalid: Vec<usize> = (0..l).filter(|j| !oracle.valid.contains(j)).collect();
    let covariates = select_columns(&cds.z, &invalid);
    let sub = CenteredDataset {
        y: cds.y.clone(),
        d: cds.d.clone(),
        z: select_columns(&cds.z, &strong),
        instrument_names: names_of(&cds.instrument_names, &strong),
        residualization: cds.residualization.clone(),
    };
    let w = ColumnSpace::new(&covariates);
    let d_res = w.annihilate(cds.d.as_slice());
    let grid = first_stage
        .basis_grid
        .clone()
        .unwrap_or_else(|| default_basis_grid(n, first_stage.degree));
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for &m in &grid {
        let spec = SplineSpec::new(first_stage.degree, m)?;
        let u = assemble_design(&sub, &spec)?.u;
        let space = ColumnSpace::new(&w.annihilate_columns(&u));
        if space.rank() == 0 || space.rank() + covariates.ncols() + 1 >= n {
            continue;
        }
        let rss = (&d_res - space.project(d_res.as_slice())).norm_squared();
        let value = Criterion::Bic.value(rss, n, space.rank());
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, u));
        }
    }
    let (_, u) = best.ok_or_else(|| R2iveError::SingularDesign("no usable oracle first stage".into()))?;
    let (beta, se) = tsls_with(&cds.y, &cds.d, &u, &covariates)?;
    Ok(BaselineResult {
        relevant_set: Some(strong),
        invalid_set: Some(invalid),
        ..BaselineResult::plain(EstimatorTag::OracleTsls, beta, Some(se))
    })
}

/// Projection of Y on the fitted instrument, treating every instrument as valid.
pub fn naive(cds: &CenteredDataset, fs: &FirstStageResult) -> Result<BaselineResult> {
    if !(fs.d_hat.norm_squared() > 0.0) {
        return Err(R2iveError::DegenerateFirstStage(
            "fitted instrument is identically zero".into(),
        ));
    }
    let none = DMatrix::zeros(cds.n(), 0);
    let post = beta_post(&cds.y, &fs.d_hat, &none, &[])?.with_structural_residuals(&cds.y, &cds.d, &none);
    let se = variance(&post, 0, VarianceMode::Homoscedastic)?;
    Ok(BaselineResult {
        relevant_set: Some(fs.relevant_set.clone()),
        ..BaselineResult::plain(EstimatorTag::Naive, post.beta, Some(se))
    })
}

/// Lasso comparator minimizing `||P_Z (Y - Z a - D b)||^2 + lambda ||a||_1`,
/// with `lambda` chosen by the same information criterion as the main
/// pipeline. Returns the result plus the linear first-stage fit for reuse.
pub fn sisvive(cds: &CenteredDataset, config: &SecondStageConfig) -> Result<(BaselineResult, DVector<f64>)> {
    let (n, l) = (cds.n(), cds.num_instruments());
    let space = ColumnSpace::new(&cds.z);
    let d_lin = space.project(cds.d.as_slice());
    let dd = d_lin.norm_squared();
    if !(dd > 0.0) {
        return Err(R2iveError::DegenerateFirstStage(
            "treatment is orthogonal to the instruments".into(),
        ));
    }
    // profiling out b leaves a Lasso of M P_Z Y on M Z, M the annihilator of P_Z D
    let py = space.project(cds.y.as_slice());
    let (yt, zt) = annihilator_transform(&py, &cds.z, &d_lin)?;
    let norms: Vec<f64> = zt.column_iter().map(|c| c.norm()).collect();
    let top = norms.iter().copied().fold(0.0_f64, f64::max);
    let sqrt_n = (n as f64).sqrt();
    let scales: Vec<f64> = norms
        .iter()
        .map(|&s| if s > 1e-12 * top && s > 0.0 { s / sqrt_n } else { 0.0 })
        .collect();
    let mut zs = zt.clone();
    for (j, mut col) in zs.column_iter_mut().enumerate() {
        if scales[j] > 0.0 {
            col /= scales[j];
        } else {
            col.fill(0.0);
        }
    }
    let problem = EnetProblem::new(&yt, &zs)?;
    let unit = vec![1.0; l];
    let grid = log_grid(problem.lambda1_max(&unit), config.lambda_ratio, config.n_lambda);
    let path = problem.path(&grid, 0.0, &unit, &config.solver)?;
    let criterion = Criterion::for_dimension(l, n, config.ebic_gamma, l);
    let unscale = |raw: &[f64]| DVector::from_fn(l, |j, _| if scales[j] > 0.0 { raw[j] / scales[j] } else { 0.0 });
    // the projected residual can be driven to zero with ~L instruments, so the
    // criterion scores the structural residual Y - Z a - D b(a) instead
    let values: Vec<f64> = path
        .iter()
        .map(|f| {
            if !f.converged {
                return f64::NAN;
            }
            let v = &cds.y - &cds.z * unscale(&f.alpha);
            let beta = d_lin.dot(&v) / dd;
            let rss = (v - &cds.d * beta).norm_squared();
            criterion.value(rss, n, f.active_set.len())
        })
        .collect();
    let best = argmin_prefer_first(&values).ok_or_else(|| R2iveError::Tuning {
        failed: vec!["comparator lasso path".into()],
    })?;
    let fit = &path[best];
    let alpha = unscale(&fit.alpha);
    let beta = d_lin.dot(&(&cds.y - &cds.z * &alpha)) / dd;
    Ok((
        BaselineResult {
            invalid_set: Some(fit.active_set.clone()),
            ..BaselineResult::plain(EstimatorTag::Sisvive, beta, None)
        },
        d_lin,
    ))
}

/// Least squares of Y on the linear first-stage fit and the comparator's
/// selected instruments.
pub fn sisvive_post(
    cds: &CenteredDataset,
    comparator: &BaselineResult,
    d_lin: &DVector<f64>,
) -> Result<BaselineResult> {
    let invalid = comparator.invalid_set.clone().unwrap_or_default();
    let zi = select_columns(&cds.z, &invalid);
    let post = beta_post(&cds.y, d_lin, &zi, &names_of(&cds.instrument_names, &invalid))?
        .with_structural_residuals(&cds.y, &cds.d, &zi);
    let se = variance(&post, invalid.len(), VarianceMode::Homoscedastic)?;
    Ok(BaselineResult {
        invalid_set: Some(invalid),
        ..BaselineResult::plain(EstimatorTag::SisvivePost, post.beta, Some(se))
    })
}

/// Fits each requested estimator on one dataset, sharing the first stage
/// between NAIVE and R2IVE and the comparator between its two variants.
/// Each entry carries its own outcome so one failure does not mask the rest.
pub fn fit_estimators(
    ds: &Dataset,
    tags: &[EstimatorTag],
    oracle: Option<&OracleSets>,
    config: &R2iveConfig,
) -> Result<Vec<(EstimatorTag, Result<BaselineResult>)>> {
    let cds = residualize(ds)?;
    let needs_fs = tags
        .iter()
        .any(|t| matches!(t, EstimatorTag::Naive | EstimatorTag::R2ive));
    let fs = if needs_fs {
        Some(tune_first_stage(cds.d.as_slice(), &cds, &config.first_stage))
    } else {
        None
    };
    let needs_sis = tags
        .iter()
        .any(|t| matches!(t, EstimatorTag::Sisvive | EstimatorTag::SisvivePost));
    let sis = if needs_sis {
        Some(sisvive(&cds, &config.second_stage))
    } else {
        None
    };
    let fs_err = |e: &R2iveError| R2iveError::DegenerateFirstStage(format!("first stage failed: {e}"));
    let out = tags
        .iter()
        .map(|&tag| {
            let res = match tag {
                EstimatorTag::Ols => ols(&cds),
                EstimatorTag::Tsls => tsls(&cds),
                EstimatorTag::OracleTsls => match oracle {
                    Some(o) => oracle_tsls(&cds, o, &config.first_stage),
                    None => Err(R2iveError::Input("ORACLE_TSLS needs oracle sets".into())),
                },
                EstimatorTag::Naive => match fs.as_ref().expect("first stage computed") {
                    Ok(fs) => naive(&cds, fs),
                    Err(e) => Err(fs_err(e)),
                },
                EstimatorTag::R2ive => match fs.as_ref().expect("first stage computed") {
                    Ok(fs) => r2ive_from_first_stage(&cds, fs, config).map(|r| BaselineResult::from(&r)),
                    Err(e) => Err(fs_err(e)),
                },
                EstimatorTag::Sisvive => match sis.as_ref().expect("comparator computed") {
                    Ok((r, _)) => Ok(r.clone()),
                    Err(e) => Err(R2iveError::Input(format!("comparator failed: {e}"))),
                },
                EstimatorTag::SisvivePost => match sis.as_ref().expect("comparator computed") {
                    Ok((r, d_lin)) => sisvive_post(&cds, r, d_lin),
                    Err(e) => Err(R2iveError::Input(format!("comparator failed: {e}"))),
                },
            };
            (tag, res)
        })
        .collect();
    Ok(out)
}

/// Every comparison estimator except R2IVE; ORACLE_TSLS only when oracle
/// sets are supplied. Errors propagate.
pub fn baselines(
    ds: &Dataset,
    oracle: Option<&OracleSets>,
    config: &R2iveConfig,
) -> Result<Vec<BaselineResult>> {
    let tags: Vec<EstimatorTag> = EstimatorTag::ALL
        .into_iter()
        .filter(|t| *t != EstimatorTag::R2ive && (oracle.is_some() || *t != EstimatorTag::OracleTsls))
        .collect();
    fit_estimators(ds, &tags, oracle, config)?
        .into_iter()
        .map(|(_, r)| r)
        .collect()
}
