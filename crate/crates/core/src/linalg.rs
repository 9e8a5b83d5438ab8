//! Thin dense linear-algebra helpers on top of `nalgebra`, exposed on `ndarray` types.

use nalgebra::{Cholesky, DMatrix, Dyn};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Smallest accepted ratio `L_jj^2 / G_jj` in a Cholesky factor before the
/// matrix is declared numerically singular.
pub(crate) const PIVOT_RATIO: f64 = 1e-12;

pub(crate) fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Cholesky factorization of a symmetric positive-definite matrix that
/// refuses (rather than regularizes) numerically singular input.
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(gram: ArrayView2<f64>) -> Option<Self> {
        let m = to_dmatrix(gram);
        let diag: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)]).collect();
        let chol = Cholesky::new(m)?;
        let l = chol.l_dirty();
        for (j, &g) in diag.iter().enumerate() {
            let ljj = l[(j, j)];
            if !(g > 0.0) || !ljj.is_finite() || ljj * ljj < PIVOT_RATIO * g {
                return None;
            }
        }
        Some(SpdFactor { chol })
    }

    pub fn solve_mat(&self, rhs: ArrayView2<f64>) -> Array2<f64> {
        let x = self.chol.solve(&to_dmatrix(rhs));
        from_dmatrix(&x)
    }
}

/// Haar-distributed random orthogonal matrix: QR of a Gaussian matrix with
/// the diagonal of R forced positive.
pub fn haar_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_dmatrix(&q)
}

/// Orthonormal basis (as columns, d × r) of the row space of `rows` (k × d),
/// assuming the rows are linearly independent.
pub(crate) fn row_space_basis(rows: ArrayView2<f64>) -> Array2<f64> {
    let m = to_dmatrix(rows.t());
    let q = m.qr().q();
    from_dmatrix(&q)
}

/// Orthonormal basis (as columns) for the orthogonal complement of the span
/// of `basis` (d × r, orthonormal columns), drawn with a seeded Gaussian.
pub(crate) fn orthogonal_complement<R: Rng + ?Sized>(
    basis: ArrayView2<f64>,
    rng: &mut R,
) -> Array2<f64> {
    let (d, r) = basis.dim();
    let extra = d - r;
    if extra == 0 {
        return Array2::zeros((d, 0));
    }
    let g = Array2::from_shape_fn((d, extra), |_| rng.sample::<f64, _>(StandardNormal));
    // two projection passes keep the residual orthogonal to working precision
    let mut z = g.clone();
    for _ in 0..2 {
        let coef = basis.t().dot(&z);
        z = &z - &basis.dot(&coef);
    }
    let q = to_dmatrix(z.view()).qr().q();
    from_dmatrix(&q)
}

pub(crate) fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub(crate) fn all_finite<'a, I: IntoIterator<Item = &'a f64>>(it: I) -> bool {
    it.into_iter().all(|x| x.is_finite())
}
