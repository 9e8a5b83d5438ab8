//! Sensitivity of NNLS solutions via the implicit function theorem on the
//! KKT system.

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::nnls::NnlsResult;
use crate::error::SolverError;
use crate::linalg::SpdFactor;

/// Below this gradient magnitude a zero coefficient counts as weakly active.
const COMPLEMENTARITY_TOL: f64 = 1e-7;

/// Jacobian `∂p/∂a` (v × d) of the NNLS minimizer at `solution`.
///
/// Rows of zero coefficients are zero; on the positive support `S` the
/// block is `(Q_S Q_Sᵀ)⁻¹ Q_S`.
pub fn nnls_implicit_jacobian(
    bank: ArrayView2<f64>,
    target: ArrayView1<f64>,
    solution: &NnlsResult,
) -> Result<Array2<f64>, SolverError> {
    let (v, d) = bank.dim();
    let p = &solution.coefficients;
    if p.len() != v || target.len() != d {
        return Err(SolverError::ShapeMismatch(format!(
            "bank {v}x{d}, target {}, solution {}",
            target.len(),
            p.len()
        )));
    }
    let gradient = (p.dot(&bank) - target).dot(&bank.t());
    let mut support = Vec::new();
    for i in 0..v {
        if p[i] > 0.0 {
            support.push(i);
        } else if gradient[i] <= COMPLEMENTARITY_TOL {
            return Err(SolverError::DegenerateActiveSet {
                index: i,
                gradient: gradient[i],
            });
        }
    }
    let mut jac = Array2::zeros((v, d));
    if support.is_empty() {
        return Ok(jac);
    }
    let q_s = Array2::from_shape_fn((support.len(), d), |(k, j)| bank[[support[k], j]]);
    let gram = q_s.dot(&q_s.t());
    let factor = SpdFactor::new(gram.view()).ok_or(SolverError::SingularGram)?;
    let block = factor.solve_mat(q_s.view());
    for (k, &i) in support.iter().enumerate() {
        jac.row_mut(i).assign(&block.row(k));
    }
    Ok(jac)
}

/// Chain rule into input space: `∂p/∂x = ∂p/∂a · ∂a/∂x` (v × m).
pub fn chain_input_jacobian(
    dp_da: ArrayView2<f64>,
    da_dx: ArrayView2<f64>,
) -> Result<Array2<f64>, SolverError> {
    if dp_da.ncols() != da_dx.nrows() {
        return Err(SolverError::ShapeMismatch(format!(
            "cannot chain {}x{} with {}x{}",
            dp_da.nrows(),
            dp_da.ncols(),
            da_dx.nrows(),
            da_dx.ncols()
        )));
    }
    Ok(dp_da.dot(&da_dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{nnls_solve, SolverOptions};
    use ndarray::{array, Array1};

    #[test]
    fn clamped_coordinate_has_zero_row() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![3.0, -2.0];
        let sol = nnls_solve(q.view(), a.view(), &SolverOptions::default()).unwrap();
        let j = nnls_implicit_jacobian(q.view(), a.view(), &sol).unwrap();
        assert_eq!(j, array![[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn orthonormal_full_support_is_bank() {
        let s = 0.5f64.sqrt();
        let q = array![[s, s, 0.0], [s, -s, 0.0]];
        let a = array![2.0, 0.5, 1.0];
        let sol = nnls_solve(q.view(), a.view(), &SolverOptions::default()).unwrap();
        assert!(sol.coefficients.iter().all(|&x| x > 0.0));
        let j = nnls_implicit_jacobian(q.view(), a.view(), &sol).unwrap();
        for (x, y) in j.iter().zip(q.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weakly_active_is_degenerate() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![1.0, 0.0];
        let sol = NnlsResult {
            coefficients: Array1::from(vec![1.0, 0.0]),
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 1,
            active_set: vec![1],
            converged: true,
        };
        assert!(matches!(
            nnls_implicit_jacobian(q.view(), a.view(), &sol),
            Err(SolverError::DegenerateActiveSet { index: 1, .. })
        ));
    }

    #[test]
    fn chain_shapes() {
        let j = array![[1.0, 2.0], [3.0, 4.0]];
        let eye = Array2::<f64>::eye(2);
        assert_eq!(chain_input_jacobian(j.view(), eye.view()).unwrap(), j);
        let zero = Array2::<f64>::zeros((2, 2));
        assert!(chain_input_jacobian(zero.view(), j.view())
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let bad = Array2::<f64>::zeros((3, 1));
        assert!(matches!(
            chain_input_jacobian(j.view(), bad.view()),
            Err(SolverError::ShapeMismatch(_))
        ));
    }
}
