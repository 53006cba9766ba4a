//! Centered B-spline expansions of each instrument and the first-stage design.
//!
//! Each instrument gets a clamped knot vector with interior knots at empirical
//! quantiles. The basis is evaluated with the Cox-de Boor recursion and then
//! mean-centered, so every block of the design has zero column means. Note that
//! a centered B-spline block spans only `m_n - 1` dimensions because the
//! uncentered functions sum to one.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::CenteredDataset;
use crate::error::{R2iveError, Result};

pub const DEFAULT_DEGREE: usize = 3;

/// Polynomial degree and per-instrument basis dimension `m_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub degree: usize,
    pub basis_dim: usize,
}

impl SplineSpec {
    pub fn new(degree: usize, basis_dim: usize) -> Result<Self> {
        let spec = Self { degree, basis_dim };
        spec.validate()?;
        Ok(spec)
    }

    /// The degenerate linear case: the centered instrument itself.
    pub fn linear() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            basis_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(R2iveError::Input("spline degree must be at least 1".into()));
        }
        if self.basis_dim == 0 || (self.basis_dim > 1 && self.basis_dim < self.degree + 1) {
            return Err(R2iveError::Input(format!(
                "basis dimension {} is not 1 and is below degree + 1 = {}",
                self.basis_dim,
                self.degree + 1
            )));
        }
        Ok(())
    }

    pub fn interior_knots(&self) -> usize {
        if self.basis_dim == 1 {
            0
        } else {
            self.basis_dim - self.degree - 1
        }
    }
}

/// Default candidate grid for `m_n`: {1, 2, 4, 5, 6, ceil(n^(1/5)) + 4}
/// restricted to values that form a valid spline space for `degree`.
pub fn default_basis_grid(n: usize, degree: usize) -> Vec<usize> {
    let rate = (n as f64).powf(0.2).ceil() as usize + 4;
    let mut grid: Vec<usize> = [1, 2, 4, 5, 6, rate]
        .into_iter()
        .filter(|&m| m == 1 || m >= degree + 1)
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Nearest-rank order statistic for quantile `q` on the `(n - 1)` scale.
pub fn quantile_order_statistic(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Clamped knot vector: boundary knots at min/max repeated `degree + 1` times
/// and `m_n - degree - 1` interior knots at equally spaced empirical quantiles.
/// Returns an empty vector for `m_n = 1`.
pub fn build_knots(z: &[f64], spec: &SplineSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.basis_dim == 1 {
        return Ok(Vec::new());
    }
    let n = z.len();
    if n < spec.basis_dim {
        return Err(R2iveError::DegenerateInstrument(format!(
            "{n} observations cannot support {} basis functions",
            spec.basis_dim
        )));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < spec.basis_dim {
        return Err(R2iveError::DegenerateInstrument(format!(
            "{} distinct values cannot support {} basis functions",
            distinct.len(),
            spec.basis_dim
        )));
    }
    let lo = sorted[0];
    let hi = sorted[n - 1];
    let k = spec.interior_knots();
    let interior: Vec<f64> = (1..=k)
        .map(|i| quantile_order_statistic(&sorted, i as f64 / (k + 1) as f64))
        .collect();
    let mut prev = lo;
    for &t in &interior {
        if t <= prev || t >= hi {
            return Err(R2iveError::DegenerateInstrument(format!(
                "quantile knots collapse (knot {t} not strictly inside ({prev}, {hi}))"
            )));
        }
        prev = t;
    }
    let mut knots = vec![lo; spec.degree + 1];
    knots.extend(interior);
    knots.extend(std::iter::repeat_n(hi, spec.degree + 1));
    Ok(knots)
}

/// Index `mu` of the knot span with `t[mu] <= x < t[mu + 1]`; the right
/// boundary belongs to the last non-empty span.
fn find_span(x: f64, knots: &[f64], degree: usize, basis_dim: usize) -> usize {
    if x >= knots[basis_dim] {
        return basis_dim - 1;
    }
    let (mut lo, mut hi) = (degree, basis_dim);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The `degree + 1` basis functions that are nonzero on span `mu`.
fn nonzero_basis(mu: usize, x: f64, knots: &[f64], degree: usize, out: &mut [f64]) {
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[mu + 1 - j];
        right[j] = knots[mu + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Uncentered basis values phi_1..phi_{m_n} (n × m_n). Points outside the
/// boundary knots are clamped first. For `m_n = 1` the column is `z` itself.
pub fn evaluate_basis_uncentered(z: &[f64], knots: &[f64], spec: &SplineSpec) -> DMatrix<f64> {
    let n = z.len();
    if spec.basis_dim == 1 {
        return DMatrix::from_column_slice(n, 1, z);
    }
    let (h, m) = (spec.degree, spec.basis_dim);
    debug_assert_eq!(knots.len(), m + h + 1);
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let mut out = DMatrix::zeros(n, m);
    let mut local = vec![0.0; h + 1];
    for (i, &raw) in z.iter().enumerate() {
        let x = raw.clamp(lo, hi);
        let mu = find_span(x, knots, h, m);
        nonzero_basis(mu, x, knots, h, &mut local);
        for (r, &v) in local.iter().enumerate() {
            out[(i, mu - h + r)] = v;
        }
    }
    out
}

/// Centered basis psi_k = phi_k - mean(phi_k), one column per basis function.
pub fn evaluate_basis(z: &[f64], knots: &[f64], spec: &SplineSpec) -> DMatrix<f64> {
    let mut b = evaluate_basis_uncentered(z, knots, spec);
    for mut col in b.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    b
}

/// A block that could not carry the requested spline space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateBlock {
    pub instrument: usize,
    pub reason: String,
}

/// First-stage design `U = (U_1, ..., U_L)` with contiguous column blocks.
#[derive(Debug, Clone)]
pub struct SplineDesign {
    pub u: DMatrix<f64>,
    pub groups: Vec<Range<usize>>,
    pub knots: Vec<Vec<f64>>,
    pub spec: SplineSpec,
    pub degenerate: Vec<DegenerateBlock>,
}

impl SplineDesign {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Expands every instrument into its centered basis block. Instruments that
/// cannot support `spec` fall back to the linear (`m_n = 1`) block and are
/// listed in `degenerate`.
pub fn assemble_design(ds: &CenteredDataset, spec: &SplineSpec) -> Result<SplineDesign> {
    spec.validate()?;
    let n = ds.n();
    let mut blocks = Vec::with_capacity(ds.num_instruments());
    let mut knots = Vec::with_capacity(ds.num_instruments());
    let mut degenerate = Vec::new();
    for j in 0..ds.num_instruments() {
        let z = ds.z.column(j);
        let z = z.as_slice();
        let (block, kv) = match build_knots(z, spec) {
            Ok(kv) => (evaluate_basis(z, &kv, spec), kv),
            Err(R2iveError::DegenerateInstrument(reason)) => {
                degenerate.push(DegenerateBlock {
                    instrument: j,
                    reason,
                });
                (evaluate_basis(z, &[], &SplineSpec::linear()), Vec::new())
            }
            Err(e) => return Err(e),
        };
        if block.ncols() == 1
            && block.norm() == 0.0
            && !degenerate.iter().any(|b| b.instrument == j)
        {
            degenerate.push(DegenerateBlock {
                instrument: j,
                reason: "constant instrument".into(),
            });
        }
        blocks.push(block);
        knots.push(kv);
    }
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut u = DMatrix::zeros(n, total);
    let mut groups = Vec::with_capacity(blocks.len());
    let mut start = 0;
    for block in &blocks {
        let w = block.ncols();
        u.columns_mut(start, w).copy_from(block);
        groups.push(start..start + w);
        start += w;
    }
    Ok(SplineDesign {
        u,
        groups,
        knots,
        spec: *spec,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Residualization;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cubic(m: usize) -> SplineSpec {
        SplineSpec::new(3, m).unwrap()
    }

    /// Piecewise polynomials built symbolically from the recursive B-spline
    /// definition, stored per knot interval in local coordinates.
    fn symbolic_basis(knots: &[f64], degree: usize, m: usize) -> Vec<Vec<Vec<f64>>> {
        let intervals = knots.len() - 1;
        // poly[i][s] = coefficients (ascending powers of x - knots[s]) of B_{i,k} on interval s
        let mut cur: Vec<Vec<Vec<f64>>> = (0..intervals)
            .map(|i| {
                (0..intervals)
                    .map(|s| {
                        if s == i && knots[i] < knots[i + 1] {
                            vec![1.0]
                        } else {
                            vec![0.0]
                        }
                    })
                    .collect()
            })
            .collect();
        for k in 1..=degree {
            let count = intervals - k;
            let mut next = Vec::with_capacity(count);
            for i in 0..count {
                let mut per = Vec::with_capacity(intervals);
                for s in 0..intervals {
                    let mut acc = vec![0.0; k + 1];
                    let w1 = knots[i + k] - knots[i];
                    if w1 > 0.0 {
                        // (x - t_i)/w1 = (u + t_s - t_i)/w1
                        let c = knots[s] - knots[i];
                        for (p, &a) in cur[i][s].iter().enumerate() {
                            acc[p] += a * c / w1;
                            acc[p + 1] += a / w1;
                        }
                    }
                    let w2 = knots[i + k + 1] - knots[i + 1];
                    if w2 > 0.0 {
                        // (t_{i+k+1} - x)/w2 = (t_{i+k+1} - t_s - u)/w2
                        let c = knots[i + k + 1] - knots[s];
                        for (p, &a) in cur[i + 1][s].iter().enumerate() {
                            acc[p] += a * c / w2;
                            acc[p + 1] -= a / w2;
                        }
                    }
                    per.push(acc);
                }
                next.push(per);
            }
            cur = next;
        }
        assert_eq!(cur.len(), m);
        cur
    }

    fn eval_symbolic(polys: &[Vec<Vec<f64>>], knots: &[f64], x: f64) -> Vec<f64> {
        let last = (0..knots.len() - 1)
            .rev()
            .find(|&s| knots[s] < knots[s + 1])
            .unwrap();
        let s = (0..knots.len() - 1)
            .find(|&s| knots[s] <= x && x < knots[s + 1])
            .unwrap_or(last);
        let u = x - knots[s];
        polys
            .iter()
            .map(|p| p[s].iter().rev().fold(0.0, |acc, &c| acc * u + c))
            .collect()
    }

    #[test]
    fn no_interior_knots() {
        let z = [0.0, 0.25, 0.5, 0.75, 1.0];
        let kv = build_knots(&z, &cubic(4)).unwrap();
        assert_eq!(kv, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_interior_knot_at_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..101).map(|_| rng.random::<f64>()).collect();
        let kv = build_knots(&z, &cubic(5)).unwrap();
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(kv.len(), 9);
        assert_eq!(kv[4], sorted[50]);
    }

    #[test]
    fn tercile_knots_match_order_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let kv = build_knots(&z, &cubic(6)).unwrap();
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        // nearest rank on the (n - 1) scale: round(199/3) = 66, round(398/3) = 133
        assert_eq!(kv[4], sorted[66]);
        assert_eq!(kv[5], sorted[133]);
        assert_eq!(kv[0], sorted[0]);
        assert_eq!(kv[9], sorted[199]);
    }

    #[test]
    fn too_few_distinct_values_is_degenerate() {
        let z = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        assert!(matches!(
            build_knots(&z, &cubic(4)),
            Err(R2iveError::DegenerateInstrument(_))
        ));
    }

    #[test]
    fn linear_case_is_centered_variable() {
        let b = evaluate_basis(&[1.0, 2.0, 3.0], &[], &SplineSpec::linear());
        assert_eq!(b.ncols(), 1);
        assert_eq!(b.column(0).as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn bernstein_identity_without_interior_knots() {
        let kv = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let b = evaluate_basis_uncentered(&[0.5], &kv, &cubic(4));
        let expected = [0.125, 0.375, 0.375, 0.125];
        for k in 0..4 {
            assert!((b[(0, k)] - expected[k]).abs() < 1e-15);
        }
        for &t in &[0.0, 0.1, 0.33, 0.9, 1.0] {
            let b = evaluate_basis_uncentered(&[t], &kv, &cubic(4));
            let bern = [
                (1.0 - t).powi(3),
                3.0 * t * (1.0 - t).powi(2),
                3.0 * t * t * (1.0 - t),
                t.powi(3),
            ];
            for k in 0..4 {
                assert!((b[(0, k)] - bern[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cox_de_boor_matches_symbolic_piecewise_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..2.0)).collect();
        let spec = cubic(6);
        let kv = build_knots(&z, &spec).unwrap();
        let polys = symbolic_basis(&kv, 3, 6);
        let b = evaluate_basis_uncentered(&z, &kv, &spec);
        let mut max_diff: f64 = 0.0;
        for (i, &x) in z.iter().enumerate() {
            let expected = eval_symbolic(&polys, &kv, x);
            for k in 0..6 {
                max_diff = max_diff.max((b[(i, k)] - expected[k]).abs());
            }
        }
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..250).map(|_| rng.sample(StandardNormal)).collect();
        for m in [4, 5, 7, 9] {
            let spec = cubic(m);
            let kv = build_knots(&z, &spec).unwrap();
            let b = evaluate_basis_uncentered(&z, &kv, &spec);
            for i in 0..z.len() {
                let s: f64 = b.row(i).sum();
                assert!((s - 1.0).abs() <= 1e-10);
                for k in 0..m {
                    // phi_k vanishes outside [t_k, t_{k+h+1}]
                    if z[i] < kv[k] || z[i] > kv[k + 4] {
                        assert_eq!(b[(i, k)], 0.0);
                    }
                }
            }
            let c = evaluate_basis(&z, &kv, &spec);
            for i in 0..z.len() {
                assert!(c.row(i).sum().abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn out_of_range_points_are_clamped() {
        let z = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let spec = cubic(5);
        let kv = build_knots(&z, &spec).unwrap();
        let inside = evaluate_basis_uncentered(&[0.0, 1.0], &kv, &spec);
        let outside = evaluate_basis_uncentered(&[-3.0, 7.0], &kv, &spec);
        assert_eq!(inside, outside);
    }

    fn centered(z: DMatrix<f64>) -> CenteredDataset {
        let n = z.nrows();
        let mut z = z;
        for mut c in z.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        CenteredDataset {
            y: DVector::zeros(n),
            d: DVector::zeros(n),
            instrument_names: (1..=z.ncols()).map(|j| format!("z{j}")).collect(),
            z,
            residualization: Residualization::InterceptOnly,
        }
    }

    #[test]
    fn design_layout_and_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = DMatrix::from_fn(80, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ds = centered(z);
        let spec = SplineSpec {
            degree: 2,
            basis_dim: 3,
        };
        let design = assemble_design(&ds, &spec).unwrap();
        assert_eq!(design.u.ncols(), 6);
        assert_eq!(design.groups, vec![0..3, 3..6]);
        for c in design.u.column_iter() {
            assert!(c.mean().abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_instrument_degrades_to_zero_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DMatrix::from_fn(50, 3, |_, j| {
            if j == 1 {
                2.5
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let design = assemble_design(&centered(z), &cubic(5)).unwrap();
        assert_eq!(design.groups, vec![0..5, 5..6, 6..11]);
        assert_eq!(design.degenerate.len(), 1);
        assert_eq!(design.degenerate[0].instrument, 1);
        assert!(design.u.column(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_spec_reproduces_centered_instruments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = DMatrix::from_fn(40, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ds = centered(z);
        let design = assemble_design(&ds, &SplineSpec::linear()).unwrap();
        assert!((&design.u - &ds.z).amax() <= 1e-14);
    }

    #[test]
    fn default_grid_keeps_feasible_dimensions() {
        assert_eq!(default_basis_grid(200, 3), vec![1, 4, 5, 6, 7]);
        assert_eq!(default_basis_grid(1000, 3), vec![1, 4, 5, 6, 8]);
        assert_eq!(default_basis_grid(200, 1), vec![1, 2, 4, 5, 6, 7]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bases_partition_unity_and_center(
            z in prop::collection::vec(-50.0f64..50.0, 30..120),
            degree in 1usize..4,
            extra in 1usize..5,
        ) {
            let spec = SplineSpec::new(degree, degree + extra).unwrap();
            let Ok(kv) = build_knots(&z, &spec) else { return Ok(()) };
            let b = evaluate_basis_uncentered(&z, &kv, &spec);
            let c = evaluate_basis(&z, &kv, &spec);
            for i in 0..z.len() {
                prop_assert!((b.row(i).sum() - 1.0).abs() <= 1e-10);
                prop_assert!(b.row(i).iter().all(|v| *v >= -1e-14));
            }
            for k in 0..c.ncols() {
                prop_assert!(c.column(k).sum().abs() <= 1e-9 * z.len() as f64);
            }
        }
    }
}
