//! Lawson–Hanson active-set NNLS.
//!
//! Problems are solved in Gram form: for a bank `Q` (v × d) and a target `a`
//! (d), minimize `½‖a − pQ‖²` over `p ≥ 0` using `G = QQᵀ` and `b = Qa`.
//! Every row of a batch shares `G`, so it is formed once.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, SolverError};
use crate::linalg::{all_finite, PIVOT_RATIO};

/// Options shared by the constrained least-squares engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// KKT tolerance for NNLS, relative-decrease tolerance for NMF.
    pub tolerance: f64,
    /// Inner iteration cap for a single NNLS call.
    pub max_iterations: usize,
    /// Outer alternation cap for NMF (and the layer-peeled oracle).
    pub max_outer_iterations: usize,
    /// Proximal penalty ρ applied to each alternating half-step.
    pub admm_penalty: f64,
    /// Initialization seed; set from the run seed.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-8,
            max_iterations: 500,
            max_outer_iterations: 200,
            admm_penalty: 1.0,
            rng_seed: 42,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::validation("solver.tolerance", "must be > 0"));
        }
        if self.max_iterations < 1 {
            return Err(Error::validation("solver.max_iterations", "must be >= 1"));
        }
        if self.max_outer_iterations < 1 {
            return Err(Error::validation(
                "solver.max_outer_iterations",
                "must be >= 1",
            ));
        }
        if !(self.admm_penalty > 0.0) || !self.admm_penalty.is_finite() {
            return Err(Error::validation("solver.admm_penalty", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnlsResult {
    pub coefficients: Array1<f64>,
    /// `½‖a − pQ‖²`
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Indices whose coefficient is exactly zero.
    pub active_set: Vec<usize>,
    pub converged: bool,
}

/// KKT residual of `p` for the gradient `g = Gp − b`.
///
/// Combines stationarity on the support, dual feasibility on the zero set
/// and complementary slackness.
pub fn kkt_residual(p: ArrayView1<f64>, g: ArrayView1<f64>) -> f64 {
    let mut r = 0.0f64;
    for (&pi, &gi) in p.iter().zip(g.iter()) {
        if pi > 0.0 {
            r = r.max(gi.abs());
        } else {
            r = r.max((-gi).max(0.0));
        }
        r = r.max((gi * pi).abs());
    }
    r
}

/// A bank prepared for repeated NNLS solves.
pub(crate) struct GramNnls {
    gram: Array2<f64>,
    tol: f64,
    max_iter: usize,
}

pub(crate) struct GramSolution {
    pub p: Array1<f64>,
    pub kkt: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GramNnls {
    pub fn new(gram: Array2<f64>, tol: f64, max_iter: usize) -> Self {
        GramNnls {
            gram,
            tol,
            max_iter,
        }
    }

    /// `½pᵀGp − bᵀp`, i.e. the objective up to the constant `½‖a‖²`.
    pub fn reduced_objective(&self, p: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        0.5 * p.dot(&self.gram.dot(&p)) - b.dot(&p)
    }

    /// Solves `G_SS x = b_S` by an in-place Cholesky factorization; `None`
    /// when a pivot falls below the singularity threshold.
    fn solve_support(&self, support: &[usize], b: ArrayView1<f64>) -> Option<Array1<f64>> {
        let k = support.len();
        let mut l = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let mut s = self.gram[[support[i], support[j]]];
                for m in 0..j {
                    s -= l[i * k + m] * l[j * k + m];
                }
                if i == j {
                    let g = self.gram[[support[i], support[i]]];
                    if !(g > 0.0) || !(s >= PIVOT_RATIO * g) || !s.is_finite() {
                        return None;
                    }
                    l[i * k + i] = s.sqrt();
                } else {
                    l[i * k + j] = s / l[j * k + j];
                }
            }
        }
        let mut x: Vec<f64> = support.iter().map(|&i| b[i]).collect();
        for i in 0..k {
            for m in 0..i {
                x[i] -= l[i * k + m] * x[m];
            }
            x[i] /= l[i * k + i];
        }
        for i in (0..k).rev() {
            for m in i + 1..k {
                x[i] -= l[m * k + i] * x[m];
            }
            x[i] /= l[i * k + i];
        }
        Some(Array1::from(x))
    }

    /// Lawson–Hanson on `min ½pᵀGp − bᵀp, p ≥ 0`.
    pub fn solve(&self, b: ArrayView1<f64>) -> GramSolution {
        self.solve_from(b, None)
    }

    /// [`GramNnls::solve`] started from the support of a feasible guess
    /// `start`; falls back to the cold start if that support is singular.
    pub fn solve_from(&self, b: ArrayView1<f64>, start: Option<ArrayView1<f64>>) -> GramSolution {
        let v = b.len();
        let mut p = Array1::<f64>::zeros(v);
        let mut passive = vec![false; v];
        // candidates that made the support singular or could not move off zero
        let mut blocked = vec![false; v];
        let mut iterations = 0usize;
        let mut hit_limit = false;

        if let Some(x0) = start {
            for i in 0..v {
                if x0[i] > 0.0 {
                    p[i] = x0[i];
                    passive[i] = true;
                }
            }
            loop {
                iterations += 1;
                let support: Vec<usize> = (0..v).filter(|&i| passive[i]).collect();
                let Some(s) = self.solve_support(&support, b) else {
                    p.fill(0.0);
                    passive.fill(false);
                    break;
                };
                if s.iter().all(|&x| x > 0.0) {
                    for (k, &i) in support.iter().enumerate() {
                        p[i] = s[k];
                    }
                    break;
                }
                step_to_boundary(&mut p, &mut passive, &support, &s);
            }
        }

        'outer: loop {
            let w = &b - &self.gram.dot(&p);
            let mut best: Option<(usize, f64)> = None;
            for i in 0..v {
                if passive[i] || blocked[i] || w[i] <= self.tol {
                    continue;
                }
                if best.is_none_or(|(_, bw)| w[i] > bw) {
                    best = Some((i, w[i]));
                }
            }
            let Some((j, _)) = best else { break };
            passive[j] = true;
            let mut first = true;

            loop {
                iterations += 1;
                if iterations > self.max_iter {
                    hit_limit = true;
                    break 'outer;
                }
                let support: Vec<usize> = (0..v).filter(|&i| passive[i]).collect();
                let Some(s) = self.solve_support(&support, b) else {
                    passive[j] = false;
                    blocked[j] = true;
                    continue 'outer;
                };
                if first {
                    let pos = support.iter().position(|&i| i == j).unwrap();
                    if s[pos] <= 0.0 {
                        passive[j] = false;
                        blocked[j] = true;
                        continue 'outer;
                    }
                    first = false;
                }
                if s.iter().all(|&x| x > 0.0) {
                    for (k, &i) in support.iter().enumerate() {
                        p[i] = s[k];
                    }
                    blocked.iter_mut().for_each(|x| *x = false);
                    break;
                }
                step_to_boundary(&mut p, &mut passive, &support, &s);
            }
        }

        let gradient = self.gram.dot(&p) - b;
        let kkt = kkt_residual(p.view(), gradient.view());
        GramSolution {
            converged: !hit_limit && kkt <= self.tol,
            p,
            kkt,
            iterations,
        }
    }
}

/// Moves `p` toward the support solution `s` until the first coordinate
/// reaches zero, and drops every zeroed coordinate from the support.
fn step_to_boundary(p: &mut Array1<f64>, passive: &mut [bool], support: &[usize], s: &Array1<f64>) {
    let mut alpha = f64::INFINITY;
    let mut hit = support[0];
    for (k, &i) in support.iter().enumerate() {
        if s[k] <= 0.0 {
            let a = p[i] / (p[i] - s[k]);
            if a < alpha {
                alpha = a;
                hit = i;
            }
        }
    }
    for (k, &i) in support.iter().enumerate() {
        p[i] += alpha * (s[k] - p[i]);
    }
    for &i in support {
        if i == hit || p[i] <= 0.0 {
            p[i] = 0.0;
            passive[i] = false;
        }
    }
}

fn validate_bank(bank: ArrayView2<f64>) -> Result<(), SolverError> {
    let (v, d) = bank.dim();
    if v == 0 || d == 0 {
        return Err(SolverError::InvalidInput(format!(
            "bank must be non-empty, got {v}x{d}"
        )));
    }
    if !all_finite(bank.iter()) {
        return Err(SolverError::NonFinite("bank"));
    }
    if let Some(r) = bank
        .axis_iter(Axis(0))
        .position(|row| row.iter().all(|&x| x == 0.0))
    {
        return Err(SolverError::InvalidInput(format!("bank row {r} is all zero")));
    }
    Ok(())
}

fn finish(
    bank: ArrayView2<f64>,
    target: ArrayView1<f64>,
    sol: GramSolution,
    tol: f64,
) -> Result<NnlsResult, SolverError> {
    let resid = &target - &sol.p.dot(&bank);
    let objective = 0.5 * resid.dot(&resid);
    let active_set = (0..sol.p.len()).filter(|&i| sol.p[i] == 0.0).collect();
    let result = NnlsResult {
        objective,
        kkt_residual: sol.kkt,
        iterations: sol.iterations,
        active_set,
        converged: sol.converged,
        coefficients: sol.p,
    };
    if result.converged {
        Ok(result)
    } else {
        Err(SolverError::IterationLimit {
            iterations: result.iterations,
            kkt_residual: result.kkt_residual.max(tol),
            best: Box::new(result),
        })
    }
}

/// Non-negative least squares `min_{p ≥ 0} ½‖target − pQ‖²` for a bank `Q`
/// (v × d). Deterministic; a zero target returns `p = 0`.
pub fn nnls_solve(
    bank: ArrayView2<f64>,
    target: ArrayView1<f64>,
    opts: &SolverOptions,
) -> Result<NnlsResult, SolverError> {
    validate_bank(bank)?;
    if target.len() != bank.ncols() {
        return Err(SolverError::ShapeMismatch(format!(
            "target has length {}, bank has {} columns",
            target.len(),
            bank.ncols()
        )));
    }
    if !all_finite(target.iter()) {
        return Err(SolverError::NonFinite("target"));
    }
    let solver = GramNnls::new(bank.dot(&bank.t()), opts.tolerance, opts.max_iterations);
    let b = bank.dot(&target);
    let sol = solver.solve(b.view());
    finish(bank, target, sol, opts.tolerance)
}

/// Row-wise NNLS against one bank; rows are solved independently (in
/// parallel on the current rayon pool) and the result equals per-row
/// [`nnls_solve`] exactly.
pub fn nnls_batch(
    bank: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    opts: &SolverOptions,
) -> Result<Array2<f64>, Error> {
    let v = bank.nrows();
    if targets.nrows() == 0 {
        return Ok(Array2::zeros((0, v)));
    }
    validate_bank(bank)?;
    if targets.ncols() != bank.ncols() {
        return Err(SolverError::ShapeMismatch(format!(
            "targets have {} columns, bank has {}",
            targets.ncols(),
            bank.ncols()
        ))
        .into());
    }
    let solver = GramNnls::new(bank.dot(&bank.t()), opts.tolerance, opts.max_iterations);
    let rows: Vec<Result<Array1<f64>, Error>> = (0..targets.nrows())
        .into_par_iter()
        .map(|i| {
            let a = targets.row(i);
            if !all_finite(a.iter()) {
                return Err(Error::Row {
                    row: i,
                    source: SolverError::NonFinite("target"),
                });
            }
            let b = bank.dot(&a);
            let sol = solver.solve(b.view());
            finish(bank, a, sol, opts.tolerance)
                .map(|r| r.coefficients)
                .map_err(|source| Error::Row { row: i, source })
        })
        .collect();
    let mut out = Array2::zeros((targets.nrows(), v));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn orthant_projection() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let r = nnls_solve(q.view(), array![3.0, -2.0].view(), &opts()).unwrap();
        assert_eq!(r.coefficients, array![3.0, 0.0]);
        assert_eq!(r.active_set, vec![1]);
        assert!((r.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_single_row() {
        let q = array![[1.0, 0.2, 0.0], [0.1, 1.0, 0.3]];
        let r = nnls_solve(q.view(), q.row(0), &opts()).unwrap();
        assert!((r.coefficients[0] - 1.0).abs() < 1e-12);
        assert!(r.coefficients[1].abs() < 1e-12);
    }

    #[test]
    fn zero_target() {
        let q = array![[1.0, 2.0], [0.5, 1.0], [3.0, 0.0]];
        let r = nnls_solve(q.view(), array![0.0, 0.0].view(), &opts()).unwrap();
        assert!(r.converged);
        assert!(r.coefficients.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let q = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(nnls_solve(q.view(), array![1.0, 1.0].view(), &opts()).is_err());
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            nnls_solve(q.view(), array![f64::NAN, 1.0].view(), &opts()),
            Err(SolverError::NonFinite(_))
        ));
    }

    #[test]
    fn iteration_limit_returns_best() {
        let q = array![[1.0, 0.3, 0.1], [0.2, 1.0, 0.1], [0.1, 0.2, 1.0]];
        let o = SolverOptions {
            max_iterations: 1,
            ..opts()
        };
        match nnls_solve(q.view(), array![1.0, 1.0, 1.0].view(), &o) {
            Err(SolverError::IterationLimit { best, .. }) => {
                assert!(!best.converged);
                assert!(best.coefficients.iter().all(|&x| x >= 0.0));
            }
            other => panic!("expected IterationLimit, got {other:?}"),
        }
    }

    #[test]
    fn batch_empty_and_copies() {
        let q = array![[1.0, 0.1, 0.0], [0.0, 1.0, 0.2]];
        let empty = Array2::<f64>::zeros((0, 3));
        assert_eq!(nnls_batch(q.view(), empty.view(), &opts()).unwrap().dim(), (0, 2));
        let t = ndarray::stack![Axis(0), q.row(0), q.row(0), q.row(0)];
        let p = nnls_batch(q.view(), t.view(), &opts()).unwrap();
        for row in p.rows() {
            assert!((row[0] - 1.0).abs() < 1e-12 && row[1].abs() < 1e-12);
        }
    }

    #[test]
    fn batch_reports_row_index() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let t = array![[1.0, 1.0], [f64::INFINITY, 0.0]];
        match nnls_batch(q.view(), t.view(), &opts()) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn instance() -> impl Strategy<Value = (Array2<f64>, Array1<f64>)> {
        (1usize..=5, 1usize..=7).prop_flat_map(|(v, d)| {
            (
                proptest::collection::vec(0.0f64..1.0, v * d),
                proptest::collection::vec(-1.0f64..2.0, d),
            )
                .prop_map(move |(q, a)| {
                    let mut q = Array2::from_shape_vec((v, d), q).unwrap();
                    for mut row in q.rows_mut() {
                        row[0] += 0.05;
                    }
                    (q, Array1::from(a))
                })
        })
    }

    proptest! {
        #[test]
        fn output_feasible_and_kkt((q, a) in instance()) {
            let r = nnls_solve(q.view(), a.view(), &opts());
            let r = match r {
                Ok(r) => r,
                Err(SolverError::IterationLimit { best, .. }) => *best,
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            };
            prop_assert!(r.coefficients.iter().all(|&x| x >= 0.0));
            if r.converged {
                prop_assert!(r.kkt_residual <= 1e-8);
            }
            // deterministic
            let again = nnls_solve(q.view(), a.view(), &opts());
            if let Ok(again) = again {
                prop_assert_eq!(again.coefficients, r.coefficients.clone());
            }
            // nudging a zero coefficient up never lowers the objective
            let eps = 1e-6;
            for &i in &r.active_set {
                let mut p = r.coefficients.clone();
                p[i] += eps;
                let res = &a - &p.dot(&q);
                prop_assert!(0.5 * res.dot(&res) >= r.objective - 1e-12);
            }
        }
    }
}
