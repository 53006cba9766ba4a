//! Small dense helpers shared by the estimation modules.
//!
//! Orthogonal projections are always applied through an orthonormal basis of
//! the column space, never through an explicit n × n matrix.

use nalgebra::{DMatrix, DVector};

/// Relative threshold on the diagonal of R below which a column is treated
/// as linearly dependent on the columns before it.
pub const RANK_TOL: f64 = 1e-10;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().sum::<f64>() / a.len() as f64
}

/// Orthonormal basis of the span of a set of columns, built by modified
/// Gram-Schmidt with one reorthogonalization pass (a thin QR).
#[derive(Debug, Clone)]
pub struct ColumnSpace {
    q: DMatrix<f64>,
    r_diag: Vec<f64>,
    dependent: Vec<usize>,
}

impl ColumnSpace {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let scale = (0..a.ncols())
            .map(|j| a.column(j).norm())
            .fold(0.0_f64, f64::max);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(a.ncols());
        let mut r_diag = Vec::with_capacity(a.ncols());
        let mut dependent = Vec::new();
        for j in 0..a.ncols() {
            let mut v: Vec<f64> = a.column(j).iter().copied().collect();
            for _ in 0..2 {
                for qk in &basis {
                    let c = dot(qk, &v);
                    axpy(-c, qk, &mut v);
                }
            }
            let nv = norm2(&v);
            r_diag.push(nv);
            if scale == 0.0 || nv <= RANK_TOL * scale {
                dependent.push(j);
                continue;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
        let mut q = DMatrix::zeros(n, basis.len());
        for (k, col) in basis.iter().enumerate() {
            q.column_mut(k).copy_from_slice(col);
        }
        Self {
            q,
            r_diag,
            dependent,
        }
    }

    pub fn rank(&self) -> usize {
        self.q.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Magnitudes of the diagonal of R, one per input column.
    pub fn r_diag(&self) -> &[f64] {
        &self.r_diag
    }

    /// Input columns found to lie in the span of earlier columns.
    pub fn dependent_columns(&self) -> &[usize] {
        &self.dependent
    }

    pub fn is_full_rank(&self) -> bool {
        self.dependent.is_empty()
    }

    /// Coordinates `Qᵀv`.
    pub fn coords(&self, v: &[f64]) -> Vec<f64> {
        (0..self.q.ncols())
            .map(|k| dot(self.q.column(k).as_slice(), v))
            .collect()
    }

    pub fn project(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (k, c) in self.coords(v).into_iter().enumerate() {
            axpy(c, self.q.column(k).as_slice(), out.as_mut_slice());
        }
        out
    }

    pub fn annihilate_in_place(&self, v: &mut [f64]) {
        for k in 0..self.q.ncols() {
            let qk = self.q.column(k);
            let c = dot(qk.as_slice(), v);
            axpy(-c, qk.as_slice(), v);
        }
    }

    pub fn annihilate(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::from_column_slice(v);
        self.annihilate_in_place(out.as_mut_slice());
        out
    }

    pub fn annihilate_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for j in 0..out.ncols() {
            self.annihilate_in_place(out.column_mut(j).as_mut_slice());
        }
        out
    }
}

/// Least-squares coefficients of `y` on the columns of `a` (full column rank
/// assumed; callers check rank with [`ColumnSpace`] first).
pub fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if a.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    let qr = a.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r().solve_upper_triangular(&qty)
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sorted_eigen(g: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = g.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(g.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).copy_from(&eig.eigenvectors.column(src));
    }
    (values, vectors)
}
