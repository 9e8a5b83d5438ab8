use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FeatureBatch;
use crate::error::{Error, Result};
use crate::etf::make_etf;

/// Collapsed-feature generator: unit-norm noisy copies of ETF vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k: usize,
    pub d: usize,
    pub samples_per_class: Vec<usize>,
    pub collapse_sigma: f64,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn balanced(k: usize, d: usize, per_class: usize, sigma: f64, seed: u64) -> Self {
        SyntheticSpec {
            k,
            d,
            samples_per_class: vec![per_class; k],
            collapse_sigma: sigma,
            rng_seed: seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.collapse_sigma >= 0.0) || !self.collapse_sigma.is_finite() {
            return Err(Error::validation("collapse_sigma", "must be >= 0"));
        }
        if self.samples_per_class.len() != self.k {
            return Err(Error::validation(
                "samples_per_class",
                format!("expected {} counts", self.k),
            ));
        }
        if self.samples_per_class.contains(&0) {
            return Err(Error::validation("samples_per_class", "counts must be >= 1"));
        }
        Ok(())
    }
}

/// Samples of class k are `normalize(s_k + σ·ε)`, with `s_k` the vertices of
/// `make_etf(K, d, seed)`.
pub fn synth_features(spec: &SyntheticSpec) -> Result<FeatureBatch> {
    spec.validate()?;
    let etf = make_etf(spec.k, spec.d, spec.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(1);
    sample_around(
        etf.vertices().view(),
        &spec.samples_per_class,
        0,
        spec.collapse_sigma,
        &mut rng,
    )
}

/// Draws `counts[i]` unit-norm samples around center row `i`, labelled
/// `label_offset + i`, class-major.
pub fn sample_around<R: Rng + ?Sized>(
    centers: ArrayView2<f64>,
    counts: &[usize],
    label_offset: u32,
    sigma: f64,
    rng: &mut R,
) -> Result<FeatureBatch> {
    let d = centers.ncols();
    let total: usize = counts.iter().sum();
    let mut f = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut r = 0;
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut row = f.row_mut(r);
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                row[j] = centers[[c, j]] + sigma * noise;
            }
            let len = row.dot(&row).sqrt();
            if len == 0.0 {
                return Err(Error::InvalidBatch(format!("sample {r} collapsed to zero")));
            }
            // leave already-unit rows untouched so noiseless samples are exact copies
            if (len - 1.0).abs() > 4.0 * f64::EPSILON {
                row /= len;
            }
            labels.push(label_offset + c as u32);
            r += 1;
        }
    }
    FeatureBatch::new(f, labels)
}
