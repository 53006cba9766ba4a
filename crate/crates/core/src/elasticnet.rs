//! Second stage: elastic net and adaptive elastic net on annihilated data,
//! used to pick out instruments with a direct effect on the outcome.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{R2iveError, Result};
use crate::ic::{argmin_prefer_first, log_grid, Criterion, DEFAULT_EBIC_GAMMA};
use crate::SolverOptions;

/// Which ceiling formula to use for the adaptive-weight exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// `ceil(2 eta / (1 - eta))`, raised to at least 1.
    Body,
    /// `ceil(2 eta / (1 - eta)) + 1`.
    #[default]
    Appendix,
}

impl TauMode {
    /// Exponent for `n` observations and `l` instruments, with
    /// `eta = ln l / ln n` clipped to `[0, 0.99]`.
    pub fn tau(self, n: usize, l: usize) -> f64 {
        let eta = if n > 1 && l > 0 {
            ((l as f64).ln() / (n as f64).ln()).clamp(0.0, 0.99)
        } else {
            0.0
        };
        let base = (2.0 * eta / (1.0 - eta) - 1e-12).ceil().max(0.0);
        match self {
            TauMode::Body => base.max(1.0),
            TauMode::Appendix => base + 1.0,
        }
    }
}

/// Elastic-net fit. `alpha` carries the `(1 + lambda2 / n)` rescale; `raw` is
/// the minimizer itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnetFit {
    pub alpha: Vec<f64>,
    pub raw: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weights: Vec<f64>,
    pub rescale: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_set: Vec<usize>,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// Inner sweeps between attempts at an exact orthant step.
const ORTHANT_STEP_EVERY: usize = 10;

/// Sufficient statistics of `(y, Z)` shared by every fit on the same data.
#[derive(Debug, Clone)]
pub struct EnetProblem {
    n: usize,
    gram: DMatrix<f64>,
    zty: DVector<f64>,
    yty: f64,
}

impl EnetProblem {
    pub fn new(y: &DVector<f64>, z: &DMatrix<f64>) -> Result<Self> {
        if y.len() != z.nrows() {
            return Err(R2iveError::Dimension(format!(
                "response has {} entries, design has {} rows",
                y.len(),
                z.nrows()
            )));
        }
        if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(R2iveError::Input("non-finite entry in elastic-net data".into()));
        }
        Ok(Self {
            n: y.len(),
            gram: z.tr_mul(z),
            zty: z.tr_mul(y),
            yty: y.norm_squared(),
        })
    }

    pub fn num_features(&self) -> usize {
        self.zty.len()
    }

    /// Smallest `lambda1` at which every finite-weight coefficient is zero.
    pub fn lambda1_max(&self, weights: &[f64]) -> f64 {
        let mut best: f64 = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            if w > 0.0 && w.is_finite() && self.gram[(j, j)] > 0.0 {
                best = best.max(2.0 * self.zty[j].abs() / w);
            }
        }
        best
    }

    /// Minimizes `||y - Z b||^2 + lambda2 ||b||^2 + lambda1 sum_j w_j |b_j|`
    /// by cyclic coordinate descent on the Gram matrix.
    pub fn fit(
        &self,
        lambda1: f64,
        lambda2: f64,
        weights: &[f64],
        opts: &SolverOptions,
        warm_raw: Option<&[f64]>,
    ) -> Result<EnetFit> {
        let p = self.num_features();
        if weights.len() != p {
            return Err(R2iveError::Dimension(format!(
                "{} weights for {p} coefficients",
                weights.len()
            )));
        }
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(R2iveError::Input(format!("invalid {name} = {v}")));
            }
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(R2iveError::Input("weights must be nonnegative".into()));
        }

        // free coordinates: finite weight and a nonzero column
        let free: Vec<usize> = (0..p)
            .filter(|&j| weights[j].is_finite() && self.gram[(j, j)] > 0.0)
            .collect();
        let mut b = vec![0.0; p];
        if let Some(w) = warm_raw.filter(|w| w.len() == p) {
            for &j in &free {
                b[j] = w[j];
            }
        }
        // g = Z'y - G b
        let mut g: Vec<f64> = self.zty.iter().copied().collect();
        for (k, &bk) in b.iter().enumerate() {
            if bk != 0.0 {
                for (gi, gk) in g.iter_mut().zip(self.gram.column(k).iter()) {
                    *gi -= gk * bk;
                }
            }
        }
        let objective = |b: &[f64], g: &[f64]| {
            let mut rss = self.yty;
            let mut pen = 0.0;
            for j in 0..p {
                if b[j] != 0.0 {
                    rss -= b[j] * (self.zty[j] + g[j]);
                    pen += lambda2 * b[j] * b[j] + lambda1 * weights[j] * b[j].abs();
                }
            }
            rss + pen
        };
        let update = |j: usize, b: &mut [f64], g: &mut [f64]| -> f64 {
            let gjj = self.gram[(j, j)];
            let z = g[j] + gjj * b[j];
            let thr = 0.5 * lambda1 * weights[j];
            let soft = if z > thr {
                z - thr
            } else if z < -thr {
                z + thr
            } else {
                0.0
            };
            let new = soft / (gjj + lambda2);
            let delta = new - b[j];
            if delta != 0.0 {
                b[j] = new;
                for (gi, gk) in g.iter_mut().zip(self.gram.column(j).iter()) {
                    *gi -= gk * delta;
                }
            }
            delta.abs()
        };

        let mut trace = vec![objective(&b, &g)];
        let push = |trace: &mut Vec<f64>, obj: f64| {
            let prev = *trace.last().unwrap();
            debug_assert!(
                obj <= prev + 1e-9 * prev.abs().max(1.0),
                "objective increased from {prev} to {obj}"
            );
            trace.push(obj);
        };
        let mut iterations = 0;
        let mut converged = false;
        'outer: while iterations < opts.max_iter {
            let mut change: f64 = 0.0;
            for &j in &free {
                change = change.max(update(j, &mut b, &mut g));
            }
            iterations += 1;
            push(&mut trace, objective(&b, &g));
            if change < opts.tol {
                converged = true;
                break;
            }
            let mut inner = 0;
            loop {
                if iterations >= opts.max_iter {
                    break 'outer;
                }
                let active: Vec<usize> = free.iter().copied().filter(|&j| b[j] != 0.0).collect();
                let mut change: f64 = 0.0;
                for &j in &active {
                    change = change.max(update(j, &mut b, &mut g));
                }
                iterations += 1;
                inner += 1;
                push(&mut trace, objective(&b, &g));
                if change < opts.tol {
                    break;
                }
                if inner % ORTHANT_STEP_EVERY == 0 {
                    let (b_prev, g_prev) = (b.clone(), g.clone());
                    if self.orthant_step(&active, lambda1, lambda2, weights, &mut b, &mut g) {
                        // near-singular systems can lose to roundoff; keep the
                        // sweep iterate then
                        if objective(&b, &g) > *trace.last().unwrap() {
                            b = b_prev;
                            g = g_prev;
                        } else {
                            push(&mut trace, objective(&b, &g));
                        }
                    }
                }
            }
        }

        let rescale = 1.0 + lambda2 / self.n as f64;
        let active_set = (0..p).filter(|&j| b[j] != 0.0).collect();
        Ok(EnetFit {
            alpha: b.iter().map(|v| v * rescale).collect(),
            objective: objective(&b, &g),
            raw: b,
            lambda1,
            lambda2,
            weights: weights.to_vec(),
            rescale,
            iterations,
            converged,
            active_set,
            objective_trace: trace,
        })
    }

    /// Jumps to the minimizer over the orthant fixed by the current signs on
    /// `active` when that minimizer keeps the same signs. Coordinate descent
    /// crawls along weakly curved directions; this step removes the crawl
    /// without changing the fixed point. Returns whether `b` moved.
    fn orthant_step(
        &self,
        active: &[usize],
        lambda1: f64,
        lambda2: f64,
        weights: &[f64],
        b: &mut [f64],
        g: &mut [f64],
    ) -> bool {
        let k = active.len();
        if k == 0 {
            return false;
        }
        let a = DMatrix::from_fn(k, k, |r, c| {
            self.gram[(active[r], active[c])] + if r == c { lambda2 } else { 0.0 }
        });
        let rhs = DVector::from_fn(k, |r, _| {
            let j = active[r];
            self.zty[j] - 0.5 * lambda1 * weights[j] * b[j].signum()
        });
        let Some(chol) = a.cholesky() else {
            return false;
        };
        let x = chol.solve(&rhs);
        if active.iter().zip(x.iter()).any(|(&j, &v)| !(v * b[j] > 0.0)) {
            return false;
        }
        for (&j, &v) in active.iter().zip(x.iter()) {
            let delta = v - b[j];
            if delta != 0.0 {
                b[j] = v;
                for (gi, gk) in g.iter_mut().zip(self.gram.column(j).iter()) {
                    *gi -= gk * delta;
                }
            }
        }
        true
    }

    /// Warm-started fits along a decreasing `lambda1` sequence.
    pub fn path(
        &self,
        lambdas: &[f64],
        lambda2: f64,
        weights: &[f64],
        opts: &SolverOptions,
    ) -> Result<Vec<EnetFit>> {
        let mut out: Vec<EnetFit> = Vec::with_capacity(lambdas.len());
        for &l1 in lambdas {
            let warm = out.last().map(|f| f.raw.as_slice());
            out.push(self.fit(l1, lambda2, weights, opts, warm)?);
        }
        Ok(out)
    }
}

/// One-shot elastic-net fit of `y` on `z`.
pub fn fit_elastic_net(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
    weights: &[f64],
    opts: &SolverOptions,
) -> Result<EnetFit> {
    EnetProblem::new(y, z)?.fit(lambda1, lambda2, weights, opts, None)
}

/// Largest violation of the optimality conditions of the un-rescaled
/// minimizer, recomputed from the raw data.
pub fn enet_kkt_violation(y: &DVector<f64>, z: &DMatrix<f64>, fit: &EnetFit) -> f64 {
    let b = DVector::from_column_slice(&fit.raw);
    let grad = 2.0 * z.tr_mul(&(y - z * &b));
    let mut worst: f64 = 0.0;
    for j in 0..b.len() {
        let w = fit.weights[j];
        let v = if w.is_infinite() {
            if b[j] != 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else if b[j] != 0.0 {
            (grad[j] - 2.0 * fit.lambda2 * b[j] - fit.lambda1 * w * b[j].signum()).abs()
        } else {
            (grad[j].abs() - fit.lambda1 * w).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// `w_j = |a_j|^(-tau)` for nonzero pilot coefficients, infinity otherwise.
pub fn adaptive_enet_weights(pilot: &[f64], tau: f64) -> Vec<f64> {
    pilot
        .iter()
        .map(|&a| if a != 0.0 { a.abs().powf(-tau) } else { f64::INFINITY })
        .collect()
}

/// Tuning grid and solver settings for the second stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecondStageConfig {
    /// Ridge levels as multiples of `n`.
    pub lambda2_factors: Vec<f64>,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    /// Grid density of the adaptive path, in points per decade, once it has
    /// to reach below the pilot-style range.
    pub points_per_decade: f64,
    pub max_path_len: usize,
    pub ebic_gamma: f64,
    pub tau_mode: TauMode,
    /// Scale every column to `||z||^2 = n` before penalizing.
    pub standardize: bool,
    pub solver: SolverOptions,
}

impl Default for SecondStageConfig {
    fn default() -> Self {
        Self {
            lambda2_factors: vec![0.0, 0.0001, 0.001, 0.01, 0.1],
            n_lambda: 50,
            lambda_ratio: 1e-3,
            points_per_decade: 50.0 / 3.0,
            max_path_len: 1000,
            ebic_gamma: DEFAULT_EBIC_GAMMA,
            tau_mode: TauMode::Appendix,
            standardize: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvalidSelection {
    pub invalid_set: Vec<usize>,
    /// Adaptive coefficients on the original column scale, rescaled.
    pub alpha: Vec<f64>,
    /// Fits on the standardized columns.
    pub pilot: EnetFit,
    pub adaptive: EnetFit,
    pub lambda2: f64,
    pub lambda1: f64,
    pub lambda1_adaptive: f64,
    pub tau: f64,
    pub criterion: Criterion,
    pub criterion_value: f64,
    /// Column scales `||z_j|| / sqrt(n)` used for standardization.
    pub scales: Vec<f64>,
    pub warnings: Vec<String>,
}

impl EnetProblem {
    /// `||y - Z b||^2` from the Gram matrix, in time linear in the support.
    pub fn rss(&self, coef: &[f64]) -> f64 {
        let support: Vec<usize> = (0..coef.len()).filter(|&j| coef[j] != 0.0).collect();
        let mut rss = self.yty;
        for &j in &support {
            let quad: f64 = support.iter().map(|&k| self.gram[(j, k)] * coef[k]).sum();
            rss += coef[j] * (quad - 2.0 * self.zty[j]);
        }
        rss.max(0.0)
    }
}

fn pick(problem: &EnetProblem, path: &[EnetFit], criterion: Criterion) -> Option<(usize, f64)> {
    let values: Vec<f64> = path
        .iter()
        .map(|f| {
            if f.converged {
                criterion.value(problem.rss(&f.alpha), problem.n, f.active_set.len())
            } else {
                f64::NAN
            }
        })
        .collect();
    argmin_prefer_first(&values).map(|i| (i, values[i]))
}

/// Adaptive path from `lambda1_max` down far enough that every coefficient
/// with a finite weight can enter, at a fixed density per decade.
fn adaptive_grid(problem: &EnetProblem, weights: &[f64], config: &SecondStageConfig) -> Vec<f64> {
    let hi = problem.lambda1_max(weights);
    if hi <= 0.0 {
        return vec![0.0];
    }
    let mut lo = hi * config.lambda_ratio;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 && w.is_finite() && problem.gram[(j, j)] > 0.0 {
            let entry = 2.0 * problem.zty[j].abs() / w;
            if entry > 0.0 {
                lo = lo.min(entry * config.lambda_ratio);
            }
        }
    }
    let decades = (hi / lo).log10();
    let count = ((decades * config.points_per_decade).ceil() as usize + 1)
        .clamp(config.n_lambda, config.max_path_len);
    log_grid(hi, lo / hi, count)
}

/// Selects the invalid instruments from annihilated data `(y, z)`.
pub fn select_invalid(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    config: &SecondStageConfig,
) -> Result<InvalidSelection> {
    let (n, l) = (z.nrows(), z.ncols());
    if y.len() != n {
        return Err(R2iveError::Dimension("outcome length mismatch".into()));
    }
    if l == 0 {
        return Err(R2iveError::Input("no instruments".into()));
    }
    let norms: Vec<f64> = z.column_iter().map(|c| c.norm()).collect();
    let top = norms.iter().copied().fold(0.0_f64, f64::max);
    let sqrt_n = (n as f64).sqrt();
    let scales: Vec<f64> = norms
        .iter()
        .map(|&s| match (s > 1e-12 * top && s > 0.0, config.standardize) {
            (false, _) => 0.0,
            (true, true) => s / sqrt_n,
            (true, false) => 1.0,
        })
        .collect();
    let mut zs = z.clone();
    for (j, mut col) in zs.column_iter_mut().enumerate() {
        if scales[j] > 0.0 {
            col /= scales[j];
        } else {
            col.fill(0.0);
        }
    }
    let problem = EnetProblem::new(y, &zs)?;
    let criterion = Criterion::for_dimension(l, n, config.ebic_gamma, l);
    let tau = config.tau_mode.tau(n, l);
    let unit = vec![1.0; l];

    let mut failed = Vec::new();
    let mut best: Option<InvalidSelection> = None;
    for &factor in &config.lambda2_factors {
        let lambda2 = factor * n as f64;
        let lmax = problem.lambda1_max(&unit);
        let grid = log_grid(lmax, config.lambda_ratio, config.n_lambda);
        let pilot_path = problem.path(&grid, lambda2, &unit, &config.solver)?;
        let Some((pi, _)) = pick(&problem, &pilot_path, criterion) else {
            failed.push(format!("lambda2={lambda2} pilot path"));
            continue;
        };
        let pilot = pilot_path.into_iter().nth(pi).expect("index on path");

        let weights = adaptive_enet_weights(&pilot.alpha, tau);
        let grid = adaptive_grid(&problem, &weights, config);
        let adaptive_path = problem.path(&grid, lambda2, &weights, &config.solver)?;
        let Some((ai, value)) = pick(&problem, &adaptive_path, criterion) else {
            failed.push(format!("lambda2={lambda2} adaptive path"));
            continue;
        };
        let adaptive = adaptive_path.into_iter().nth(ai).expect("index on path");
        if best.as_ref().is_none_or(|b| value < b.criterion_value) {
            let alpha = adaptive
                .alpha
                .iter()
                .zip(&scales)
                .map(|(a, s)| if *s > 0.0 { a / s } else { 0.0 })
                .collect();
            best = Some(InvalidSelection {
                invalid_set: adaptive.active_set.clone(),
                alpha,
                lambda2,
                lambda1: pilot.lambda1,
                lambda1_adaptive: adaptive.lambda1,
                pilot,
                adaptive,
                tau,
                criterion,
                criterion_value: value,
                scales: scales.clone(),
                warnings: Vec::new(),
            });
        }
    }
    let mut sel = best.ok_or(R2iveError::Tuning { failed })?;
    let k = sel.invalid_set.len();
    if k >= l {
        sel.warnings.push(format!(
            "all {l} instruments selected as invalid; the effect is not identified"
        ));
    } else if 2 * k >= l {
        sel.warnings.push(format!(
            "{k} of {l} instruments selected as invalid; identification needs fewer than half"
        ));
    }
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    fn objective(y: &DVector<f64>, z: &DMatrix<f64>, b: &DVector<f64>, l1: f64, l2: f64, w: &[f64]) -> f64 {
        let pen: f64 = b.iter().zip(w).map(|(v, w)| if *v != 0.0 { w * v.abs() } else { 0.0 }).sum();
        (y - z * b).norm_squared() + l2 * b.norm_squared() + l1 * pen
    }

    /// Global minimizer by enumerating every sign pattern in {-1, 0, 1}^p and
    /// solving the stationarity system restricted to it.
    fn sign_pattern_oracle(y: &DVector<f64>, z: &DMatrix<f64>, l1: f64, l2: f64, w: &[f64]) -> DVector<f64> {
        let p = z.ncols();
        let g = z.tr_mul(z);
        let c = z.tr_mul(y);
        let mut best = DVector::zeros(p);
        let mut best_obj = objective(y, z, &best, l1, l2, w);
        for code in 0..3usize.pow(p as u32) {
            let mut signs = vec![0.0; p];
            let mut rem = code;
            for s in signs.iter_mut() {
                *s = [0.0, 1.0, -1.0][rem % 3];
                rem /= 3;
            }
            let act: Vec<usize> = (0..p).filter(|&j| signs[j] != 0.0).collect();
            if act.is_empty() {
                continue;
            }
            let k = act.len();
            let a = DMatrix::from_fn(k, k, |r, s| g[(act[r], act[s])] + if r == s { l2 } else { 0.0 });
            let rhs = DVector::from_fn(k, |r, _| c[act[r]] - 0.5 * l1 * w[act[r]] * signs[act[r]]);
            let Some(sol) = a.lu().solve(&rhs) else { continue };
            if act.iter().enumerate().any(|(r, &j)| sol[r] * signs[j] <= 0.0) {
                continue;
            }
            let mut b = DVector::zeros(p);
            for (r, &j) in act.iter().enumerate() {
                b[j] = sol[r];
            }
            let obj = objective(y, z, &b, l1, l2, w);
            if obj < best_obj {
                best_obj = obj;
                best = b;
            }
        }
        best
    }

    #[test]
    fn gram_rss_matches_direct_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian(&mut rng, 30, 8);
        let y = DVector::from_fn(30, |_, _| rng.sample(StandardNormal));
        let problem = EnetProblem::new(&y, &z).unwrap();
        let coef = [0.5, 0.0, -1.25, 0.0, 0.0, 2.0, 0.0, 0.1];
        let direct = (&y - &z * DVector::from_column_slice(&coef)).norm_squared();
        assert!((problem.rss(&coef) - direct).abs() <= 1e-10 * direct.max(1.0));
        assert_eq!(problem.rss(&[0.0; 8]), y.norm_squared());
    }

    #[test]
    fn unpenalized_limit_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = gaussian(&mut rng, 50, 5);
        let y = DVector::from_fn(50, |_, _| rng.sample(StandardNormal));
        let fit = fit_elastic_net(&y, &z, 0.0, 0.0, &[1.0; 5], &opts()).unwrap();
        let ls = z.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        for j in 0..5 {
            assert!((fit.alpha[j] - ls[j]).abs() <= 1e-6);
        }
        assert_eq!(fit.rescale, 1.0);
    }

    #[test]
    fn orthonormal_closed_form_matches_sign_pattern_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 30;
        let q = gaussian(&mut rng, n, 6).qr().q();
        let y = DVector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let c = q.tr_mul(&y);
        let (l1, l2) = (1.5, 0.7);
        let fit = fit_elastic_net(&y, &q, l1, l2, &[1.0; 6], &opts()).unwrap();
        let oracle = sign_pattern_oracle(&y, &q, l1, l2, &[1.0; 6]);
        for j in 0..6 {
            let soft = c[j].signum() * (c[j].abs() - l1 / 2.0).max(0.0);
            let closed = soft / (1.0 + l2);
            assert!((fit.raw[j] - closed).abs() <= 1e-10);
            assert!((fit.raw[j] - oracle[j]).abs() <= 1e-10);
            assert!((fit.alpha[j] - closed * (1.0 + l2 / n as f64)).abs() <= 1e-10);
        }
    }

    #[test]
    fn general_design_matches_sign_pattern_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let z = gaussian(&mut rng, 25, 6);
            let y = DVector::from_fn(25, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..3.0)).collect();
            let l1 = rng.random_range(1.0..20.0);
            let l2 = rng.random_range(0.0..5.0);
            let fit = fit_elastic_net(&y, &z, l1, l2, &w, &opts()).unwrap();
            let oracle = sign_pattern_oracle(&y, &z, l1, l2, &w);
            for j in 0..6 {
                assert!((fit.raw[j] - oracle[j]).abs() <= 1e-6, "{:?} vs {:?}", fit.raw, oracle);
                assert_eq!(fit.raw[j] == 0.0, oracle[j] == 0.0);
            }
        }
    }

    #[test]
    fn zero_at_lambda_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = gaussian(&mut rng, 40, 8);
        let y = DVector::from_fn(40, |_, _| rng.sample(StandardNormal));
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..2.0)).collect();
        let problem = EnetProblem::new(&y, &z).unwrap();
        let lmax = problem.lambda1_max(&w);
        for l2 in [0.0, 1.0, 10.0] {
            let fit = problem.fit(lmax, l2, &w, &opts(), None).unwrap();
            assert!(fit.alpha.iter().all(|&a| a == 0.0));
        }
        let fit = problem.fit(0.95 * lmax, 0.0, &w, &opts(), None).unwrap();
        assert_eq!(fit.active_set.len(), 1);
    }

    #[test]
    fn kkt_certified_and_rescale_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..50 {
            let n = 40 + trial;
            let z = gaussian(&mut rng, n, 12);
            let beta = DVector::from_fn(12, |j, _| if j < 3 { 1.0 } else { 0.0 });
            let y = &z * beta + DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w: Vec<f64> = (0..12)
                .map(|_| if rng.random_bool(0.1) { f64::INFINITY } else { rng.random_range(0.1..3.0) })
                .collect();
            let problem = EnetProblem::new(&y, &z).unwrap();
            let l1 = problem.lambda1_max(&w) * rng.random_range(0.01..0.9);
            let l2 = rng.random_range(0.0..0.2) * n as f64;
            let fit = problem.fit(l1, l2, &w, &opts(), None).unwrap();
            assert!(fit.converged);
            assert!(enet_kkt_violation(&y, &z, &fit) <= 1e-6 * y.norm());
            let unscaled: Vec<f64> = fit.alpha.iter().map(|a| a / fit.rescale).collect();
            let refit = EnetFit { raw: unscaled, ..fit.clone() };
            assert!(enet_kkt_violation(&y, &z, &refit) <= 1e-6 * y.norm());
            for j in 0..12 {
                if w[j].is_infinite() {
                    assert_eq!(fit.alpha[j], 0.0);
                }
            }
            assert!(fit.objective_trace.windows(2).all(|p| p[1] <= p[0] + 1e-9 * p[0]));
        }
    }

    #[test]
    fn zero_column_is_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut z = gaussian(&mut rng, 20, 3);
        z.column_mut(1).fill(0.0);
        let y = DVector::from_fn(20, |_, _| rng.sample(StandardNormal));
        let fit = fit_elastic_net(&y, &z, 0.0, 0.0, &[1.0; 3], &opts()).unwrap();
        assert_eq!(fit.alpha[1], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn adaptive_weight_examples() {
        assert_eq!(adaptive_enet_weights(&[0.0, 0.5], 2.0), vec![f64::INFINITY, 4.0]);
        assert_eq!(adaptive_enet_weights(&[-0.5], 3.0), vec![8.0]);
    }

    proptest! {
        #[test]
        fn adaptive_weights_decrease_with_magnitude(
            a in prop::collection::vec(-10.0f64..10.0, 2..20),
            tau in 1u32..16,
        ) {
            let w = adaptive_enet_weights(&a, tau as f64);
            for j in 0..a.len() {
                for k in 0..a.len() {
                    if a[j].abs() > a[k].abs() && a[k] != 0.0 {
                        prop_assert!(w[j] <= w[k]);
                        if w[k].is_finite() && w[k] > f64::MIN_POSITIVE && w[j] > 0.0 {
                            prop_assert!(w[j] < w[k] || w[k] == f64::INFINITY);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn tau_formulas() {
        // ln 100 / ln 200 = 0.869..., 2 eta / (1 - eta) = 13.27...
        assert_eq!(TauMode::Body.tau(200, 100), 14.0);
        assert_eq!(TauMode::Appendix.tau(200, 100), 15.0);
        assert_eq!(TauMode::Body.tau(200, 1), 1.0);
        assert_eq!(TauMode::Appendix.tau(200, 1), 1.0);
        // eta is clipped at 0.99
        assert_eq!(TauMode::Appendix.tau(10, 100), 199.0);
    }

    #[test]
    fn noise_free_toy_recovers_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 60;
        let q = gaussian(&mut rng, n, 5).qr().q() * 3.0;
        let alpha = DVector::from_column_slice(&[1.0, 1.0, 0.0, 0.0, 0.0]);
        let y = &q * alpha;
        let sel = select_invalid(&y, &q, &SecondStageConfig::default()).unwrap();
        assert_eq!(sel.invalid_set, vec![0, 1]);
        assert!(sel.warnings.is_empty());
    }

    #[test]
    fn identification_warning_when_half_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 60;
        let q = gaussian(&mut rng, n, 4).qr().q();
        let y = &q * DVector::from_column_slice(&[2.0, -3.0, 0.0, 0.0]);
        let sel = select_invalid(&y, &q, &SecondStageConfig::default()).unwrap();
        assert_eq!(sel.invalid_set, vec![0, 1]);
        assert_eq!(sel.warnings.len(), 1);
    }
}
