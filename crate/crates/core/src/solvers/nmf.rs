//! Non-negative matrix factorization `A ≈ P·Q` (P: n × v, Q: v × d) by
//! alternating exact NNLS half-steps.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nnls::{GramNnls, SolverOptions};
use crate::error::SolverError;
use crate::linalg::all_finite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfResult {
    /// n × v coefficients.
    pub p: Array2<f64>,
    /// v × d basis; row i is concept `c_i`.
    pub q: Array2<f64>,
    /// `½‖A − PQ‖²_F` after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl NmfResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }
}

fn half_sq_residual(a: ArrayView2<f64>, p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let r = &a - &p.dot(q);
    0.5 * r.iter().map(|x| x * x).sum::<f64>()
}

/// One block update: every row `x_i` of `current` (m × v) is replaced by the
/// NNLS minimizer of `½xᵀGx − b_iᵀx + ρ/2‖x − x_i‖²`, where row `i` of
/// `rhs` is `b_i`. A row is only replaced if it lowers the unpenalized
/// objective, which keeps the outer objective monotone.
fn block_update(
    gram: Array2<f64>,
    rhs: &Array2<f64>,
    current: &Array2<f64>,
    proximal: f64,
    opts: &SolverOptions,
) -> Array2<f64> {
    let v = gram.nrows();
    let plain = GramNnls::new(gram.clone(), opts.tolerance, opts.max_iterations);
    let mut shifted = gram;
    for i in 0..v {
        shifted[[i, i]] += proximal;
    }
    let solver = GramNnls::new(shifted, opts.tolerance, opts.max_iterations);
    let rows: Vec<Array1<f64>> = (0..rhs.nrows())
        .into_par_iter()
        .map(|i| {
            let b = rhs.row(i);
            let old = current.row(i);
            let b_prox = &b + &(&old * proximal);
            let sol = solver.solve_from(b_prox.view(), Some(old));
            let f_new = plain.reduced_objective(sol.p.view(), b);
            let f_old = plain.reduced_objective(old, b);
            if f_new <= f_old {
                sol.p
            } else {
                old.to_owned()
            }
        })
        .collect();
    let mut out = Array2::zeros(current.dim());
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

/// Factorizes a non-negative `A` (n × d) at rank `v`.
///
/// Each outer iteration solves the P half-step against the current Q and
/// then the Q half-step against the fresh P. Both half-steps are NNLS
/// problems with a proximal term `ρ/2‖X − X_t‖²` (ρ = `opts.admm_penalty`)
/// and are solved exactly. Stops when the relative objective decrease drops
/// below `opts.tolerance` or after `opts.max_outer_iterations`.
pub fn nmf_admm(a: ArrayView2<f64>, rank: usize, opts: &SolverOptions) -> Result<NmfResult, SolverError> {
    let (n, d) = a.dim();
    let proximal = opts.admm_penalty;
    if !(proximal > 0.0) || !proximal.is_finite() {
        return Err(SolverError::InvalidInput("admm_penalty must be > 0".into()));
    }
    if !all_finite(a.iter()) {
        return Err(SolverError::NonFinite("activation matrix"));
    }
    for ((row, col), &x) in a.indexed_iter() {
        if x < 0.0 {
            return Err(SolverError::NegativeInput { row, col });
        }
    }
    let limit = n.min(d);
    if rank == 0 || rank > limit {
        return Err(SolverError::RankTooLarge { rank, limit });
    }

    let mean = a.sum() / (n * d) as f64;
    let scale = (mean / rank as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut p = Array2::from_shape_fn((n, rank), |_| rng.random::<f64>() * scale);
    let mut q = Array2::from_shape_fn((rank, d), |_| rng.random::<f64>() * scale);

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_outer_iterations {
        // rows of A against Q
        let rhs_p = a.dot(&q.t());
        p = block_update(q.dot(&q.t()), &rhs_p, &p, proximal, opts);
        // columns of A against the updated P
        let rhs_q = a.t().dot(&p);
        let qt = block_update(p.t().dot(&p), &rhs_q, &q.t().to_owned(), proximal, opts);
        q = qt.t().to_owned();

        let obj = half_sq_residual(a, &p, &q);
        let prev = trace.last().copied();
        trace.push(obj);
        if obj == 0.0 {
            converged = true;
            break;
        }
        if let Some(prev) = prev {
            if (prev - obj) / prev.max(f64::MIN_POSITIVE) < opts.tolerance {
                converged = true;
                break;
            }
        }
    }
    Ok(NmfResult {
        p,
        q,
        objective_trace: trace,
        converged,
    })
}
