//! Simplex equiangular tight frames and neural-collapse diagnostics.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureBatch;
use crate::linalg::{haar_orthogonal, norm, orthogonal_complement, row_space_basis};

/// K unit vectors in d ≥ K − 1 dimensions with pairwise inner product
/// −1/(K − 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtfSimplex {
    vertices: Array2<f64>,
}

impl EtfSimplex {
    /// K × d, one vertex per row.
    pub fn vertices(&self) -> &Array2<f64> {
        &self.vertices
    }

    pub fn k(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn d(&self) -> usize {
        self.vertices.ncols()
    }

    pub fn vertex(&self, k: usize) -> Array1<f64> {
        self.vertices.row(k).to_owned()
    }

    /// The same frame with vertices `keep..K` moved by a seeded orthogonal
    /// map that fixes the span of vertices `0..keep`.
    ///
    /// The result is still a simplex ETF and shares its first `keep`
    /// vertices with `self`, but its remaining vertices no longer coincide.
    pub fn rotate_tail(&self, keep: usize, seed: u64) -> EtfSimplex {
        let (k, d) = self.vertices.dim();
        if keep == 0 || keep >= k {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = row_space_basis(self.vertices.slice(ndarray::s![..keep, ..]));
        let comp = orthogonal_complement(head.view(), &mut rng);
        let r = haar_orthogonal(comp.ncols(), &mut rng);
        // x ↦ x − C Cᵀx + C R Cᵀx
        let mut out = self.vertices.clone();
        for mut row in out.rows_mut().into_iter().skip(keep) {
            let c = comp.t().dot(&row);
            let moved = comp.dot(&(r.dot(&c) - &c));
            row += &moved;
        }
        debug_assert_eq!(out.dim(), (k, d));
        EtfSimplex { vertices: out }
    }
}

/// Builds a K-vertex simplex ETF in `d` dimensions.
///
/// The centered simplex `√(K/(K−1))(I − 𝟙𝟙ᵀ/K)` is written in an
/// orthonormal basis of 𝟙^⊥ (K − 1 coordinates) and embedded through the
/// first K − 1 columns of a seeded Haar orthogonal d × d matrix.
pub fn make_etf(k: usize, d: usize, rotation_seed: u64) -> Result<EtfSimplex> {
    if k < 2 {
        return Err(Error::validation("K", "need at least 2 vertices"));
    }
    if d + 1 < k {
        return Err(Error::DimensionTooSmall { k, d });
    }
    let basis = helmert_basis(k);
    let mut rng = ChaCha8Rng::seed_from_u64(rotation_seed);
    let u = haar_orthogonal(d, &mut rng);
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    let vertices = basis.dot(&u.slice(ndarray::s![.., ..k - 1]).t()) * scale;
    Ok(EtfSimplex { vertices })
}

/// K × (K−1) matrix whose orthonormal columns span the complement of 𝟙.
fn helmert_basis(k: usize) -> Array2<f64> {
    let mut b = Array2::zeros((k, k - 1));
    for j in 0..k - 1 {
        let m = (j + 1) as f64;
        let c = 1.0 / (m * (m + 1.0)).sqrt();
        for i in 0..=j {
            b[[i, j]] = c;
        }
        b[[j + 1, j]] = -m * c;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtfCheck {
    pub max_norm_dev: f64,
    pub max_cosine_dev: f64,
    pub pass: bool,
}

/// Measures how far the rows of `s` are from a unit-norm simplex ETF.
pub fn verify_etf(s: ArrayView2<f64>, tol: f64) -> EtfCheck {
    let k = s.nrows();
    let target = -1.0 / (k as f64 - 1.0);
    let gram = s.dot(&s.t());
    let mut max_norm_dev = 0.0f64;
    let mut max_cosine_dev = 0.0f64;
    for i in 0..k {
        max_norm_dev = max_norm_dev.max((gram[[i, i]].sqrt() - 1.0).abs());
        for j in 0..k {
            if i != j {
                max_cosine_dev = max_cosine_dev.max((gram[[i, j]] - target).abs());
            }
        }
    }
    EtfCheck {
        max_norm_dev,
        max_cosine_dev,
        pass: max_norm_dev <= tol && max_cosine_dev <= tol,
    }
}

/// Collapse diagnostics for features against a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    /// `tr(Σ_W) / tr(Σ_B)`, with Σ_W averaged over samples and Σ_B over
    /// class means (centered at their mean).
    pub within_class_variability: f64,
    /// `cos(w_k, h̄_k)` per class.
    pub alignment_cosines: Vec<f64>,
    /// `max |offdiag(WWᵀ)| / max diag(WWᵀ)`.
    pub ww_t_offdiag_ratio: f64,
    /// Fraction of samples whose classifier argmax equals the nearest class
    /// mean.
    pub nearest_center_agreement: f64,
}

pub(crate) fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let den = norm(a) * norm(b);
    if den == 0.0 {
        0.0
    } else {
        a.dot(&b) / den
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(v: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn nc_metrics(features: &FeatureBatch, w: ArrayView2<f64>) -> Result<NcReport> {
    let k = w.nrows();
    let d = w.ncols();
    if features.dim() != d {
        return Err(Error::InvalidBatch(format!(
            "features have dimension {}, classifier has {d}",
            features.dim()
        )));
    }
    let h = features.features();
    let labels = features.labels();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &y) in h.axis_iter(Axis(0)).zip(labels) {
        let y = y as usize;
        if y >= k {
            return Err(Error::MissingRow(y as u32));
        }
        sums.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(c as u32));
    }
    let means = Array2::from_shape_fn((k, d), |(c, j)| sums[[c, j]] / counts[c] as f64);

    let mut within = 0.0;
    for (row, &y) in h.axis_iter(Axis(0)).zip(labels) {
        let diff = &row - &means.row(y as usize);
        within += diff.dot(&diff);
    }
    within /= h.nrows() as f64;
    let global = means.mean_axis(Axis(0)).unwrap();
    let between = means
        .axis_iter(Axis(0))
        .map(|m| {
            let diff = &m - &global;
            diff.dot(&diff)
        })
        .sum::<f64>()
        / k as f64;
    let within_class_variability = if within == 0.0 {
        0.0
    } else {
        (within / between).min(f64::MAX)
    };

    let alignment_cosines = (0..k).map(|c| cosine(w.row(c), means.row(c))).collect();

    let gram = w.dot(&w.t());
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for i in 0..k {
        diag = diag.max(gram[[i, i]]);
        for j in 0..k {
            if i != j {
                off = off.max(gram[[i, j]].abs());
            }
        }
    }
    let ww_t_offdiag_ratio = if off == 0.0 { 0.0 } else { (off / diag).min(f64::MAX) };

    let mut agree = 0usize;
    for row in h.axis_iter(Axis(0)) {
        let logits = w.dot(&row);
        let by_logit = argmax(logits.view());
        let dist = means
            .axis_iter(Axis(0))
            .map(|m| -(&row - &m).mapv(|x| x * x).sum())
            .collect::<Array1<f64>>();
        if by_logit == argmax(dist.view()) {
            agree += 1;
        }
    }
    Ok(NcReport {
        within_class_variability,
        alignment_cosines,
        ww_t_offdiag_ratio,
        nearest_center_agreement: agree as f64 / h.nrows() as f64,
    })
}
