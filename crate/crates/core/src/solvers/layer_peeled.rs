//! Unconstrained-features model with MSE loss, solved by exact block
//! coordinate descent. Serves as a reference optimum for collapse checks.
//!
//! Features are tied within a class (`H = H̄Y`), so the objective reads
//! `1/(2N) Σ_k n_k‖W h̄_k − e_k‖² + λ_W/2‖W‖² + λ_H/2 Σ_k n_k‖h̄_k‖²`.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nnls::SolverOptions;
use crate::error::{Error, SolverError};
use crate::linalg::SpdFactor;

const RESTARTS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPeeledResult {
    /// K × d classifier.
    pub w: Array2<f64>,
    /// d × K class features, column k is `h̄_k`.
    pub h_bar: Array2<f64>,
    pub per_class_counts: Vec<usize>,
    pub lambdas: (f64, f64),
    pub final_objective: f64,
    pub objective_trace: Vec<f64>,
}

struct Problem {
    counts: Array1<f64>,
    n: f64,
    lambda_w: f64,
    lambda_h: f64,
}

impl Problem {
    fn objective(&self, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
        let k = self.counts.len();
        let wh = w.dot(h);
        let mut fit = 0.0;
        for c in 0..k {
            let col = wh.column(c);
            let r: f64 = (0..k)
                .map(|i| {
                    let e = if i == c { 1.0 } else { 0.0 };
                    (col[i] - e).powi(2)
                })
                .sum();
            fit += self.counts[c] * r;
        }
        let hw: f64 = (0..k)
            .map(|c| self.counts[c] * h.column(c).dot(&h.column(c)))
            .sum();
        fit / (2.0 * self.n)
            + 0.5 * self.lambda_w * w.iter().map(|x| x * x).sum::<f64>()
            + 0.5 * self.lambda_h * hw
    }

    fn update_w(&self, h: &Array2<f64>) -> Result<Array2<f64>, SolverError> {
        let d = h.nrows();
        // W (H̄DH̄ᵀ/N + λ_W I) = DH̄ᵀ/N
        let dh_t = Array2::from_shape_fn((h.ncols(), d), |(k, j)| self.counts[k] * h[[j, k]] / self.n);
        let mut lhs = h.dot(&dh_t);
        for i in 0..d {
            lhs[[i, i]] += self.lambda_w;
        }
        let f = SpdFactor::new(lhs.view()).ok_or(SolverError::SingularGram)?;
        // lhs is symmetric, so Wᵀ = lhs⁻¹ (DH̄ᵀ/N)ᵀ
        Ok(f.solve_mat(dh_t.t()).t().to_owned())
    }

    fn update_h(&self, w: &Array2<f64>) -> Result<Array2<f64>, SolverError> {
        let d = w.ncols();
        let mut lhs = w.t().dot(w);
        for i in 0..d {
            lhs[[i, i]] += self.n * self.lambda_h;
        }
        let f = SpdFactor::new(lhs.view()).ok_or(SolverError::SingularGram)?;
        // column k solves (WᵀW + Nλ_H I) h̄_k = Wᵀe_k
        Ok(f.solve_mat(w.t()))
    }

    fn run(&self, d: usize, seed: u64, opts: &SolverOptions) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>), SolverError> {
        let k = self.counts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Array2::from_shape_fn((k, d), |_| StandardNormal.sample(&mut rng));
        let mut h = Array2::from_shape_fn((d, k), |_| StandardNormal.sample(&mut rng));
        let mut trace = vec![self.objective(&w, &h)];
        for _ in 0..opts.max_outer_iterations {
            let prev = *trace.last().unwrap();
            w = self.update_w(&h)?;
            let mid = self.objective(&w, &h);
            h = self.update_h(&w)?;
            let obj = self.objective(&w, &h);
            for (before, after) in [(prev, mid), (mid, obj)] {
                if !after.is_finite() || after > before + 1e-12 * (1.0 + before.abs()) {
                    return Err(SolverError::Divergence(format!(
                        "objective rose from {before:e} to {after:e}"
                    )));
                }
            }
            trace.push(obj);
            if (prev - obj) <= opts.tolerance * prev.abs() {
                break;
            }
        }
        Ok((w, h, trace))
    }
}

/// Minimizes the regularized MSE objective over `W` and class features
/// `H̄` with ≥ 5 seeded restarts, returning the lowest final objective.
///
/// Labels must cover `0..K` with every class present. Iterates until the
/// relative decrease per sweep is at most `opts.tolerance` or
/// `opts.max_outer_iterations` sweeps.
pub fn layer_peeled_optimize(
    labels: &[u32],
    d: usize,
    lambdas: (f64, f64),
    opts: &SolverOptions,
) -> Result<LayerPeeledResult, Error> {
    let (lambda_w, lambda_h) = lambdas;
    if !(lambda_w > 0.0 && lambda_h > 0.0) {
        return Err(SolverError::InvalidInput("regularization weights must be > 0".into()).into());
    }
    let k = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0);
    if k < 2 {
        return Err(SolverError::InvalidInput("need at least two classes".into()).into());
    }
    if d + 1 < k {
        return Err(Error::DimensionTooSmall { k, d });
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y as usize] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c as u32));
    }
    let problem = Problem {
        counts: counts.iter().map(|&c| c as f64).collect(),
        n: labels.len() as f64,
        lambda_w,
        lambda_h,
    };
    let runs: Vec<_> = (0..RESTARTS)
        .into_par_iter()
        .map(|r| problem.run(d, opts.rng_seed.wrapping_add(r), opts))
        .collect();
    let mut best: Option<(Array2<f64>, Array2<f64>, Vec<f64>)> = None;
    for run in runs {
        let run = run?;
        let better = match &best {
            None => true,
            Some(b) => run.2.last() < b.2.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (w, h_bar, trace) = best.expect("at least one restart");
    Ok(LayerPeeledResult {
        w,
        h_bar,
        per_class_counts: counts,
        lambdas,
        final_objective: *trace.last().unwrap(),
        objective_trace: trace,
    })
}
