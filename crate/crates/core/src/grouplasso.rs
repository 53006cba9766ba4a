//! First stage: group Lasso, adaptive group Lasso and the fitted optimal
//! instrument.
//!
//! The solver minimizes `||d - X g||^2 + lambda * sum_j w_j ||g_j||_2` by cyclic
//! block coordinate descent. Blocks with orthonormal columns get the closed-form
//! groupwise soft-threshold; other blocks solve their subproblem exactly in the
//! eigenbasis of `X_j' X_j` with a one-dimensional Newton iteration on the
//! block norm.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CenteredDataset;
use crate::error::{R2iveError, Result};
use crate::ic::{argmin_prefer_first, log_grid, Criterion, DEFAULT_EBIC_GAMMA};
use crate::linalg::{axpy, dot, norm2, sorted_eigen};
use crate::splines::{assemble_design, default_basis_grid, DegenerateBlock, SplineDesign, SplineSpec};
use crate::SolverOptions;

const ORTHONORMAL_TOL: f64 = 1e-10;
const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
enum BlockKind {
    Orthonormal,
    General {
        eigenvalues: DVector<f64>,
        eigenvectors: DMatrix<f64>,
    },
}

/// Design matrix partitioned into contiguous column groups.
#[derive(Debug, Clone)]
pub struct BlockDesign {
    x: DMatrix<f64>,
    groups: Vec<Range<usize>>,
    kinds: Vec<BlockKind>,
}

impl BlockDesign {
    pub fn new(x: DMatrix<f64>, groups: Vec<Range<usize>>) -> Result<Self> {
        let mut expected = 0;
        for g in &groups {
            if g.start != expected || g.end < g.start {
                return Err(R2iveError::Input(
                    "groups must be contiguous and cover the columns in order".into(),
                ));
            }
            expected = g.end;
        }
        if expected != x.ncols() {
            return Err(R2iveError::Dimension(format!(
                "groups cover {expected} columns, design has {}",
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(R2iveError::Input("non-finite entry in design".into()));
        }
        let kinds = groups
            .iter()
            .map(|g| {
                let block = x.columns(g.start, g.len());
                let gram = block.transpose() * block;
                let is_orthonormal = (0..g.len()).all(|a| {
                    (0..g.len()).all(|b| {
                        let target = if a == b { 1.0 } else { 0.0 };
                        (gram[(a, b)] - target).abs() <= ORTHONORMAL_TOL
                    })
                });
                if is_orthonormal {
                    BlockKind::Orthonormal
                } else {
                    let (eigenvalues, eigenvectors) = sorted_eigen(&gram);
                    BlockKind::General {
                        eigenvalues,
                        eigenvectors,
                    }
                }
            })
            .collect();
        Ok(Self { x, groups, kinds })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_orthonormal(&self, group: usize) -> bool {
        matches!(self.kinds[group], BlockKind::Orthonormal)
    }

    fn block_col(&self, col: usize) -> &[f64] {
        let n = self.x.nrows();
        &self.x.as_slice()[col * n..(col + 1) * n]
    }

    /// `X_j' v`
    fn block_tmul(&self, group: usize, v: &[f64], out: &mut [f64]) {
        for (k, col) in self.groups[group].clone().enumerate() {
            out[k] = dot(self.block_col(col), v);
        }
    }
}

/// Spline design with every block replaced by an orthonormal basis of its
/// column span, plus the maps back to spline coefficients.
#[derive(Debug, Clone)]
pub struct OrthonormalDesign {
    pub design: BlockDesign,
    /// `transforms[j]` maps block coordinates to spline coefficients (m_j × r_j).
    pub transforms: Vec<DMatrix<f64>>,
}

impl OrthonormalDesign {
    pub fn from_spline(spline: &SplineDesign) -> Result<Self> {
        let n = spline.u.nrows();
        let mut blocks = Vec::with_capacity(spline.groups.len());
        let mut transforms = Vec::with_capacity(spline.groups.len());
        for g in &spline.groups {
            let u = spline.u.columns(g.start, g.len());
            let gram = u.transpose() * u;
            let (values, vectors) = sorted_eigen(&gram);
            let top = values.iter().copied().fold(0.0_f64, f64::max);
            let keep: Vec<usize> = (0..values.len())
                .filter(|&k| top > 0.0 && values[k] > EIGEN_FLOOR * top)
                .collect();
            let mut t = DMatrix::zeros(g.len(), keep.len());
            for (dst, &k) in keep.iter().enumerate() {
                t.column_mut(dst)
                    .copy_from(&(vectors.column(k) / values[k].sqrt()));
            }
            blocks.push(&u * &t);
            transforms.push(t);
        }
        let total: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut x = DMatrix::zeros(n, total);
        let mut groups = Vec::with_capacity(blocks.len());
        let mut start = 0;
        for b in &blocks {
            x.columns_mut(start, b.ncols()).copy_from(b);
            groups.push(start..start + b.ncols());
            start += b.ncols();
        }
        let kinds = vec![BlockKind::Orthonormal; groups.len()];
        Ok(Self {
            design: BlockDesign { x, groups, kinds },
            transforms,
        })
    }

    /// Spline coefficients for block coordinates `theta`.
    pub fn to_spline_coefficients(&self, theta: &[f64], spline: &SplineDesign) -> Vec<f64> {
        let mut gamma = vec![0.0; spline.u.ncols()];
        for (j, t) in self.transforms.iter().enumerate() {
            let src = &theta[self.design.groups[j].clone()];
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mapped = t * DVector::from_column_slice(src);
            gamma[spline.groups[j].clone()].copy_from_slice(mapped.as_slice());
        }
        gamma
    }
}

/// One penalized fit of the group problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupPenaltyFit {
    pub gamma: Vec<f64>,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub group_norms: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_groups: Vec<usize>,
    /// Objective after every coordinate-descent pass.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// Smallest penalty at which every group with positive finite weight is zero.
pub fn lambda_max(d: &[f64], design: &BlockDesign, weights: &[f64]) -> f64 {
    let mut buf = Vec::new();
    let mut best: f64 = 0.0;
    for (j, g) in design.groups.iter().enumerate() {
        let w = weights[j];
        if !(w > 0.0 && w.is_finite()) || g.is_empty() {
            continue;
        }
        buf.resize(g.len(), 0.0);
        design.block_tmul(j, d, &mut buf);
        best = best.max(2.0 * norm2(&buf) / w);
    }
    best
}

/// Inner products among design columns that have been active, grown as
/// columns enter. Shared along a path so each pair is computed once.
#[derive(Debug, Default)]
pub struct GramCache {
    cols: Vec<usize>,
    /// design column -> position in `cols`
    pos: Vec<Option<usize>>,
    /// `gram[q][r] = x_{cols[q]}' x_{cols[r]}`
    gram: Vec<Vec<f64>>,
    /// `x_{cols[q]}' d`
    xd: Vec<f64>,
}

impl GramCache {
    fn ensure(&mut self, design: &BlockDesign, d: &[f64], cols: &[usize]) {
        if self.pos.len() != design.x.ncols() {
            *self = GramCache {
                pos: vec![None; design.x.ncols()],
                ..Default::default()
            };
        }
        for &col in cols {
            if self.pos[col].is_some() {
                continue;
            }
            let x = design.block_col(col);
            let mut own = Vec::with_capacity(self.cols.len() + 1);
            for (q, &other) in self.cols.iter().enumerate() {
                let v = dot(design.block_col(other), x);
                self.gram[q].push(v);
                own.push(v);
            }
            own.push(dot(x, x));
            self.pos[col] = Some(self.cols.len());
            self.cols.push(col);
            self.gram.push(own);
            self.xd.push(dot(x, d));
        }
    }
}

struct GroupSolver<'a> {
    design: &'a BlockDesign,
    lambda: f64,
    weights: &'a [f64],
    gamma: Vec<f64>,
    resid: Vec<f64>,
    grad: Vec<f64>,
    newc: Vec<f64>,
}

impl GroupSolver<'_> {
    fn penalty(&self) -> f64 {
        let mut p = 0.0;
        for (j, g) in self.design.groups.iter().enumerate() {
            let w = self.weights[j];
            if w > 0.0 && w.is_finite() {
                p += w * norm2(&self.gamma[g.clone()]);
            }
        }
        self.lambda * p
    }

    fn objective(&self) -> f64 {
        dot(&self.resid, &self.resid) + self.penalty()
    }

    /// Exact minimization over block `j` against the residual; returns the
    /// max abs coefficient change.
    fn update(&mut self, j: usize) -> f64 {
        let g = self.design.groups[j].clone();
        if g.is_empty() || !self.weights[j].is_finite() {
            return 0.0;
        }
        let design = self.design;
        self.grad.resize(g.len(), 0.0);
        design.block_tmul(j, &self.resid, &mut self.grad);
        self.propose(j);
        let mut max_change: f64 = 0.0;
        for (k, col) in g.enumerate() {
            let delta = self.newc[k] - self.gamma[col];
            if delta != 0.0 {
                axpy(-delta, design.block_col(col), &mut self.resid);
                self.gamma[col] = self.newc[k];
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// As `update`, but reading `X_j' r` from `c = X_cache' r` and keeping
    /// `c` current through the cached Gram columns instead of the residual.
    fn update_cached(&mut self, j: usize, cache: &GramCache, c: &mut [f64]) -> f64 {
        let g = self.design.groups[j].clone();
        if g.is_empty() || !self.weights[j].is_finite() {
            return 0.0;
        }
        self.grad.resize(g.len(), 0.0);
        for (k, col) in g.clone().enumerate() {
            self.grad[k] = c[cache.pos[col].expect("active column cached")];
        }
        self.propose(j);
        let mut max_change: f64 = 0.0;
        for (k, col) in g.enumerate() {
            let delta = self.newc[k] - self.gamma[col];
            if delta != 0.0 {
                let q = cache.pos[col].expect("active column cached");
                axpy(-delta, &cache.gram[q], c);
                self.gamma[col] = self.newc[k];
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// `||d - X gamma||^2 + penalty` from cached quantities; every nonzero
    /// coefficient must sit on a cached column.
    fn objective_cached(&self, dd: f64, cache: &GramCache, c: &[f64]) -> f64 {
        let mut rss = dd;
        for (q, &col) in cache.cols.iter().enumerate() {
            let v = self.gamma[col];
            if v != 0.0 {
                rss -= v * (cache.xd[q] + c[q]);
            }
        }
        rss.max(0.0) + self.penalty()
    }

    /// Block minimizer into `newc`, given `grad = X_j' r` at the current
    /// coefficients.
    fn propose(&mut self, j: usize) {
        let g = self.design.groups[j].clone();
        let m = g.len();
        let design = self.design;
        let penalty = self.lambda * self.weights[j];
        self.newc.resize(m, 0.0);
        let old = &self.gamma[g.clone()];
        match &design.kinds[j] {
            BlockKind::Orthonormal => {
                // c = X_j' r + g_old
                for k in 0..m {
                    self.grad[k] += old[k];
                }
                let cn = norm2(&self.grad);
                let scale = if penalty == 0.0 {
                    1.0
                } else if 2.0 * cn <= penalty {
                    0.0
                } else {
                    1.0 - penalty / (2.0 * cn)
                };
                for k in 0..m {
                    self.newc[k] = scale * self.grad[k];
                }
            }
            BlockKind::General {
                eigenvalues,
                eigenvectors,
            } => {
                // c = X_j' r + G g_old, computed in the eigenbasis of G
                let old_v = DVector::from_column_slice(old);
                let mut ct = eigenvectors.tr_mul(&DVector::from_column_slice(&self.grad));
                let ot = eigenvectors.tr_mul(&old_v);
                let top = eigenvalues.iter().copied().fold(0.0_f64, f64::max);
                for k in 0..m {
                    if eigenvalues[k] > EIGEN_FLOOR * top && top > 0.0 {
                        ct[k] += eigenvalues[k] * ot[k];
                    } else {
                        ct[k] = 0.0;
                    }
                }
                // at a zero start c equals X_j' r exactly, matching lambda_max
                let cn = if old.iter().all(|&v| v == 0.0) {
                    norm2(&self.grad)
                } else {
                    ct.norm()
                };
                let mut coef = DVector::zeros(m);
                if penalty == 0.0 {
                    for k in 0..m {
                        if ct[k] != 0.0 {
                            coef[k] = ct[k] / eigenvalues[k];
                        }
                    }
                } else if 2.0 * cn > penalty {
                    let t = solve_block_norm(ct.as_slice(), eigenvalues.as_slice(), penalty);
                    for k in 0..m {
                        coef[k] = 2.0 * ct[k] * t / (2.0 * eigenvalues[k] * t + penalty);
                    }
                }
                let back = eigenvectors * coef;
                self.newc.copy_from_slice(back.as_slice());
            }
        }
    }

    fn recompute_residual(&mut self, d: &[f64]) {
        self.resid.copy_from_slice(d);
        for (col, &v) in self.gamma.iter().enumerate() {
            if v != 0.0 {
                axpy(-v, self.design.block_col(col), &mut self.resid);
            }
        }
    }

    fn is_active(&self, j: usize) -> bool {
        self.gamma[self.design.groups[j].clone()]
            .iter()
            .any(|&v| v != 0.0)
    }
}

/// Root `t > 0` of `sum_k (2 c_k / (2 e_k t + p))^2 = 1`, the norm of the
/// block minimizer. The function is convex and decreasing, so Newton from 0
/// increases monotonically to the root.
fn solve_block_norm(c: &[f64], e: &[f64], p: f64) -> f64 {
    let mut t = 0.0_f64;
    for _ in 0..200 {
        let mut f = -1.0;
        let mut df = 0.0;
        for (ck, ek) in c.iter().zip(e) {
            if *ck == 0.0 {
                continue;
            }
            let den = 2.0 * ek * t + p;
            let q = 2.0 * ck / den;
            f += q * q;
            df -= 2.0 * q * q * 2.0 * ek / den;
        }
        if f <= 0.0 || df >= 0.0 {
            break;
        }
        let step = -f / df;
        t += step;
        if step <= 1e-15 * t {
            break;
        }
    }
    t
}

/// Minimizes `||d - X g||^2 + lambda * sum_j w_j ||g_j||_2`. Weights may be
/// infinite (group fixed at zero) or zero (group unpenalized).
pub fn fit_group_lasso(
    d: &[f64],
    design: &BlockDesign,
    lambda: f64,
    weights: &[f64],
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<GroupPenaltyFit> {
    fit_group_lasso_cached(d, design, lambda, weights, opts, warm_start, &mut GramCache::default())
}

/// [`fit_group_lasso`] reusing column inner products from earlier fits on
/// the same `(d, design)`.
pub fn fit_group_lasso_cached(
    d: &[f64],
    design: &BlockDesign,
    lambda: f64,
    weights: &[f64],
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
    cache: &mut GramCache,
) -> Result<GroupPenaltyFit> {
    let n = design.nrows();
    if d.len() != n {
        return Err(R2iveError::Dimension(format!(
            "response has {} entries, design has {n} rows",
            d.len()
        )));
    }
    if weights.len() != design.num_groups() {
        return Err(R2iveError::Dimension(format!(
            "{} weights for {} groups",
            weights.len(),
            design.num_groups()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(R2iveError::Input(format!("invalid penalty level {lambda}")));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(R2iveError::Input("non-finite response".into()));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(R2iveError::Input("weights must be nonnegative".into()));
    }

    let p = design.x.ncols();
    let mut gamma = match warm_start {
        Some(w) if w.len() == p => w.to_vec(),
        _ => vec![0.0; p],
    };
    for (j, g) in design.groups.iter().enumerate() {
        if weights[j].is_infinite() {
            gamma[g.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut resid = d.to_vec();
    for (col, &v) in gamma.iter().enumerate() {
        if v != 0.0 {
            axpy(-v, design.block_col(col), &mut resid);
        }
    }

    let mut solver = GroupSolver {
        design,
        lambda,
        weights,
        gamma,
        resid,
        grad: Vec::new(),
        newc: Vec::new(),
    };
    let candidates: Vec<usize> = (0..design.num_groups())
        .filter(|&j| weights[j].is_finite() && !design.groups[j].is_empty())
        .collect();

    let dd = dot(d, d);
    let mut trace = vec![solver.objective()];
    let mut iterations = 0;
    let mut converged = false;
    let record = |solver: &GroupSolver, trace: &mut Vec<f64>| {
        let obj = solver.objective();
        let prev = *trace.last().unwrap();
        debug_assert!(
            obj <= prev + 1e-9 * prev.abs().max(1.0),
            "objective increased from {prev} to {obj}"
        );
        trace.push(obj);
    };
    'outer: while iterations < opts.max_iter {
        let mut change: f64 = 0.0;
        for &j in &candidates {
            change = change.max(solver.update(j));
        }
        iterations += 1;
        record(&solver, &mut trace);
        if change < opts.tol {
            converged = true;
            break;
        }
        // sweeps over the active blocks run on cached inner products; the
        // residual is rebuilt once they settle
        let active: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&j| solver.is_active(j))
            .collect();
        let active_cols: Vec<usize> = active.iter().flat_map(|&j| design.groups[j].clone()).collect();
        cache.ensure(design, d, &active_cols);
        let mut c: Vec<f64> = cache
            .cols
            .iter()
            .map(|&col| dot(design.block_col(col), &solver.resid))
            .collect();
        loop {
            if iterations >= opts.max_iter {
                solver.recompute_residual(d);
                break 'outer;
            }
            let mut change: f64 = 0.0;
            for &j in &active {
                if solver.is_active(j) {
                    change = change.max(solver.update_cached(j, cache, &mut c));
                }
            }
            iterations += 1;
            let obj = solver.objective_cached(dd, cache, &c);
            let prev = *trace.last().unwrap();
            debug_assert!(
                obj <= prev + 1e-9 * prev.abs().max(1.0),
                "objective increased from {prev} to {obj}"
            );
            trace.push(obj);
            if change < opts.tol {
                break;
            }
        }
        solver.recompute_residual(d);
    }

    let group_norms: Vec<f64> = design
        .groups
        .iter()
        .map(|g| norm2(&solver.gamma[g.clone()]))
        .collect();
    let active_groups = (0..design.num_groups())
        .filter(|&j| group_norms[j] > 0.0)
        .collect();
    Ok(GroupPenaltyFit {
        objective: solver.objective(),
        gamma: solver.gamma,
        lambda,
        weights: weights.to_vec(),
        group_norms,
        iterations,
        converged,
        active_groups,
        objective_trace: trace,
    })
}

/// Fits along a decreasing penalty sequence with warm starts.
pub fn fit_group_lasso_path(
    d: &[f64],
    design: &BlockDesign,
    weights: &[f64],
    lambdas: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<GroupPenaltyFit>> {
    let mut out: Vec<GroupPenaltyFit> = Vec::with_capacity(lambdas.len());
    let mut cache = GramCache::default();
    for &lambda in lambdas {
        let warm = out.last().map(|f| f.gamma.as_slice());
        out.push(fit_group_lasso_cached(d, design, lambda, weights, opts, warm, &mut cache)?);
    }
    Ok(out)
}

/// Largest violation of the optimality conditions of `fit`, recomputed from
/// the raw design.
pub fn group_kkt_violation(d: &[f64], design: &BlockDesign, fit: &GroupPenaltyFit) -> f64 {
    let x = design.x();
    let resid = DVector::from_column_slice(d) - x * DVector::from_column_slice(&fit.gamma);
    let mut worst: f64 = 0.0;
    for (j, g) in design.groups().iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let block = x.columns(g.start, g.len());
        let grad = 2.0 * block.tr_mul(&resid);
        let coef = DVector::from_column_slice(&fit.gamma[g.clone()]);
        let w = fit.weights[j];
        let cn = coef.norm();
        let v = if w.is_infinite() {
            if cn > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else if cn > 0.0 {
            (grad - coef * (fit.lambda * w / cn)).norm()
        } else {
            (grad.norm() - fit.lambda * w).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// `w_j = 1 / ||g_j||` for groups selected by the pilot, infinity otherwise.
pub fn adaptive_group_weights(pilot: &GroupPenaltyFit) -> Vec<f64> {
    pilot
        .group_norms
        .iter()
        .map(|&nrm| if nrm > 0.0 { 1.0 / nrm } else { f64::INFINITY })
        .collect()
}

/// Tuning grid and solver settings for the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirstStageConfig {
    pub degree: usize,
    /// Candidate values of `m_n`; `None` uses [`default_basis_grid`].
    pub basis_grid: Option<Vec<usize>>,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub ebic_gamma: f64,
    pub solver: SolverOptions,
}

impl Default for FirstStageConfig {
    fn default() -> Self {
        Self {
            degree: crate::splines::DEFAULT_DEGREE,
            basis_grid: None,
            n_lambda: 50,
            lambda_ratio: 1e-3,
            ebic_gamma: DEFAULT_EBIC_GAMMA,
            solver: SolverOptions::default(),
        }
    }
}

/// Summary of the tuned fit for one value of `m_n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisCandidate {
    pub basis_dim: usize,
    pub criterion: Criterion,
    pub criterion_value: f64,
    pub lambda_pilot: f64,
    pub lambda_adaptive: f64,
    pub relevant: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FirstStageResult {
    pub relevant_set: Vec<usize>,
    pub d_hat: DVector<f64>,
    pub basis_dim: usize,
    pub lambda_pilot: f64,
    pub lambda_adaptive: f64,
    /// Pilot and adaptive fits in the orthonormalized block coordinates.
    pub pilot: GroupPenaltyFit,
    pub adaptive: GroupPenaltyFit,
    /// Adaptive coefficients mapped back to the spline basis.
    pub gamma: Vec<f64>,
    pub criterion: Criterion,
    pub criterion_value: f64,
    pub candidates: Vec<BasisCandidate>,
    pub design: SplineDesign,
    pub orthonormal: OrthonormalDesign,
    pub degenerate: Vec<DegenerateBlock>,
}

fn spline_df(spline: &SplineDesign, active: &[usize]) -> usize {
    active.iter().map(|&j| spline.groups[j].len()).sum()
}

/// Fits a path and returns the index chosen by the criterion, or `None` if
/// nothing converged.
fn best_on_path(
    d: &[f64],
    design: &BlockDesign,
    spline: &SplineDesign,
    weights: &[f64],
    lambdas: &[f64],
    criterion: Criterion,
    opts: &SolverOptions,
) -> Result<(Vec<GroupPenaltyFit>, Option<(usize, f64)>)> {
    let n = d.len();
    // past n/2 degrees of freedom the fits are saturated and the criterion
    // no longer discriminates; the path stops at the first such point
    let mut path: Vec<GroupPenaltyFit> = Vec::with_capacity(lambdas.len());
    let mut cache = GramCache::default();
    for &lambda in lambdas {
        let warm = path.last().map(|f| f.gamma.as_slice());
        let fit = fit_group_lasso_cached(d, design, lambda, weights, opts, warm, &mut cache)?;
        let saturated = 2 * spline_df(spline, &fit.active_groups) > n;
        path.push(fit);
        if saturated {
            break;
        }
    }
    let values: Vec<f64> = path
        .iter()
        .map(|fit| {
            if !fit.converged {
                return f64::NAN;
            }
            let fitted = design.x() * DVector::from_column_slice(&fit.gamma);
            let rss: f64 = d
                .iter()
                .zip(fitted.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            criterion.value(rss, n, spline_df(spline, &fit.active_groups))
        })
        .collect();
    let best = argmin_prefer_first(&values).map(|i| (i, values[i]));
    Ok((path, best))
}

/// Selects `m_n`, the pilot penalty and the adaptive penalty by information
/// criterion and returns the relevant set with the fitted optimal instrument.
pub fn tune_first_stage(
    d: &[f64],
    ds: &CenteredDataset,
    config: &FirstStageConfig,
) -> Result<FirstStageResult> {
    let n = ds.n();
    let l = ds.num_instruments();
    if d.len() != n {
        return Err(R2iveError::Dimension("treatment length mismatch".into()));
    }
    let grid = config
        .basis_grid
        .clone()
        .unwrap_or_else(|| default_basis_grid(n, config.degree));
    if grid.is_empty() || config.n_lambda == 0 {
        return Err(R2iveError::Input("empty tuning grid".into()));
    }

    let mut failed = Vec::new();
    let mut candidates = Vec::new();
    let mut best: Option<FirstStageResult> = None;
    for &m in &grid {
        let spec = SplineSpec::new(config.degree, m)?;
        let spline = assemble_design(ds, &spec)?;
        let ortho = OrthonormalDesign::from_spline(&spline)?;
        let design = &ortho.design;
        let criterion = Criterion::for_dimension(m * l, n, config.ebic_gamma, l);

        let unit: Vec<f64> = design
            .groups()
            .iter()
            .map(|g| if g.is_empty() { f64::INFINITY } else { 1.0 })
            .collect();
        let lmax = lambda_max(d, design, &unit);
        let lambdas = log_grid(lmax, config.lambda_ratio, config.n_lambda);
        let (pilot_path, pilot_best) =
            best_on_path(d, design, &spline, &unit, &lambdas, criterion, &config.solver)?;
        let Some((pi, _)) = pilot_best else {
            failed.push(format!("m_n={m} pilot path"));
            continue;
        };
        let pilot = pilot_path.into_iter().nth(pi).expect("index on path");

        let weights = adaptive_group_weights(&pilot);
        let lmax = lambda_max(d, design, &weights);
        let lambdas = log_grid(lmax, config.lambda_ratio, config.n_lambda);
        let (adaptive_path, adaptive_best) =
            best_on_path(d, design, &spline, &weights, &lambdas, criterion, &config.solver)?;
        let Some((ai, value)) = adaptive_best else {
            failed.push(format!("m_n={m} adaptive path"));
            continue;
        };
        let adaptive = adaptive_path.into_iter().nth(ai).expect("index on path");

        candidates.push(BasisCandidate {
            basis_dim: m,
            criterion,
            criterion_value: value,
            lambda_pilot: pilot.lambda,
            lambda_adaptive: adaptive.lambda,
            relevant: adaptive.active_groups.clone(),
        });
        let improves = best.as_ref().is_none_or(|b| value < b.criterion_value);
        if improves {
            let gamma = ortho.to_spline_coefficients(&adaptive.gamma, &spline);
            let mut d_hat = DVector::zeros(n);
            for &j in &adaptive.active_groups {
                for col in spline.groups[j].clone() {
                    axpy(gamma[col], spline.u.column(col).as_slice(), d_hat.as_mut_slice());
                }
            }
            best = Some(FirstStageResult {
                relevant_set: adaptive.active_groups.clone(),
                d_hat,
                basis_dim: m,
                lambda_pilot: pilot.lambda,
                lambda_adaptive: adaptive.lambda,
                degenerate: spline.degenerate.clone(),
                pilot,
                adaptive,
                gamma,
                criterion,
                criterion_value: value,
                candidates: Vec::new(),
                design: spline,
                orthonormal: ortho,
            });
        }
    }
    let mut result = best.ok_or(R2iveError::Tuning { failed })?;
    result.candidates = candidates;
    Ok(result)
}
