//! Concept bank: a non-negative basis of base-session crop activations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{clamp_nonneg, extract, sample_patches, FeatureExtractor, PatchInput, PatchSpec};
use crate::linalg::norm;
use crate::solvers::{
    chain_input_jacobian, nmf_admm, nnls_batch, nnls_implicit_jacobian, nnls_solve, NmfResult,
    SolverOptions,
};

/// Restarts tried when factorizing the bank; the lowest objective wins.
pub const BANK_RESTARTS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub objective_trace: Vec<f64>,
    pub seeds: Vec<u64>,
    pub chosen_restart: usize,
    /// Final objective of every restart, in seed order.
    pub restart_objectives: Vec<f64>,
    pub requested_rank: usize,
    pub pruned_rows: usize,
}

/// v × d non-negative basis; rows are concepts. Rows are stored unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    q: Array2<f64>,
    stats: BankStats,
}

impl ConceptBank {
    /// Wraps an existing basis after checking it is non-negative and has
    /// no all-zero rows.
    pub fn from_parts(q: Array2<f64>, stats: BankStats) -> Result<Self> {
        if q.nrows() == 0 {
            return Err(Error::RankTooSmall(0));
        }
        if q.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::validation("bank", "entries must be finite and non-negative"));
        }
        if q.axis_iter(Axis(0)).any(|r| r.iter().all(|&x| x == 0.0)) {
            return Err(Error::validation("bank", "all-zero row"));
        }
        Ok(ConceptBank { q, stats })
    }

    /// Factorizes clamped activations `a` (rows = crops) at `rank` with
    /// [`BANK_RESTARTS`] seeds derived from `opts.rng_seed`.
    pub fn from_activations(a: ArrayView2<f64>, rank: usize, opts: &SolverOptions) -> Result<Self> {
        let seeds: Vec<u64> = (0..BANK_RESTARTS).map(|r| opts.rng_seed.wrapping_add(r)).collect();
        let mut best: Option<(usize, NmfResult)> = None;
        let mut restart_objectives = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let run = nmf_admm(a, rank, &SolverOptions { rng_seed: seed, ..*opts })?;
            let obj = run.final_objective();
            restart_objectives.push(obj);
            if best.as_ref().is_none_or(|(_, b)| obj < b.final_objective()) {
                best = Some((i, run));
            }
        }
        let (chosen, run) = best.expect("at least one restart");
        let keep: Vec<usize> = (0..rank)
            .filter(|&i| run.q.row(i).iter().any(|&x| x > 0.0))
            .collect();
        let pruned = rank - keep.len();
        if pruned * 2 > rank {
            return Err(Error::RankCollapse { pruned, rank });
        }
        if pruned > 0 {
            log::warn!("pruned {pruned} all-zero concept rows (rank {rank} -> {})", keep.len());
        }
        Ok(ConceptBank {
            q: run.q.select(Axis(0), &keep),
            stats: BankStats {
                objective_trace: run.objective_trace,
                seeds,
                chosen_restart: chosen,
                restart_objectives,
                requested_rank: rank,
                pruned_rows: pruned,
            },
        })
    }

    pub fn q(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn rank(&self) -> usize {
        self.q.nrows()
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn stats(&self) -> &BankStats {
        &self.stats
    }
}

/// Crops the base inputs, extracts and clamps activations, and factorizes
/// them into a bank of `rank` concepts.
pub fn build_concept_bank(
    ext: &dyn FeatureExtractor,
    base: PatchInput<'_>,
    patch_spec: &PatchSpec,
    rank: usize,
    opts: &SolverOptions,
) -> Result<ConceptBank> {
    let crops = sample_patches(base, patch_spec)?;
    let labels = vec![0; crops.nrows()];
    let a = clamp_nonneg(extract(ext, crops.view(), labels)?.features().view());
    ConceptBank::from_activations(a.view(), rank, opts)
}

/// Concept coefficients of one (already clamped) activation.
pub fn infer_coefficients(bank: &ConceptBank, activation: ArrayView1<f64>, opts: &SolverOptions) -> Result<Array1<f64>> {
    Ok(nnls_solve(bank.q.view(), activation, opts)?.coefficients)
}

/// Concept coefficients for every row of `activations` (already clamped).
pub fn infer_coefficients_batch(bank: &ConceptBank, activations: ArrayView2<f64>, opts: &SolverOptions) -> Result<Array2<f64>> {
    nnls_batch(bank.q.view(), activations, opts)
}

/// `∂p/∂x` (v × m) for input `x`: the NNLS Jacobian chained through the
/// clamp (derivative 1 where the activation is positive, 0 elsewhere) and
/// the extractor Jacobian.
pub fn concept_input_attribution(
    ext: &dyn FeatureExtractor,
    bank: &ConceptBank,
    x: ArrayView1<f64>,
    opts: &SolverOptions,
) -> Result<Array2<f64>> {
    let raw = ext.forward(x);
    if raw.iter().all(|&v| v <= 0.0) {
        return Ok(Array2::zeros((bank.rank(), x.len())));
    }
    let a = raw.mapv(|v| v.max(0.0));
    let sol = nnls_solve(bank.q.view(), a.view(), opts)?;
    let dp_da = nnls_implicit_jacobian(bank.q.view(), a.view(), &sol)?;
    let mut da_dx = ext.jacobian(x);
    for (i, mut row) in da_dx.axis_iter_mut(Axis(0)).enumerate() {
        if raw[i] <= 0.0 {
            row.fill(0.0);
        }
    }
    Ok(chain_input_jacobian(dp_da.view(), da_dx.view())?)
}

/// Mean cosine between distinct concept rows over ordered pairs.
pub fn bank_similarity(bank: &ConceptBank) -> Result<f64> {
    let v = bank.rank();
    if v < 2 {
        return Err(Error::RankTooSmall(v));
    }
    let mut unit = bank.q.clone();
    for mut row in unit.axis_iter_mut(Axis(0)) {
        let n = norm(row.view());
        row /= n;
    }
    let g = unit.dot(&unit.t());
    let total: f64 = (0..v)
        .flat_map(|i| (0..v).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| g[[i, j]])
        .sum();
    Ok(total / (v * (v - 1)) as f64)
}
