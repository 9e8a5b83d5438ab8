use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm};

const UNIT_TOL: f64 = 1e-9;

/// n × d activations with one class label per row.
///
/// Labels always form a contiguous id range. `normalized` records whether
/// every row has unit ℓ2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    features: Array2<f64>,
    labels: Vec<u32>,
    normalized: bool,
}

impl FeatureBatch {
    pub fn new(features: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidBatch(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if !all_finite(features.iter()) {
            return Err(Error::InvalidBatch("non-finite feature value".into()));
        }
        let distinct: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
        if let (Some(&lo), Some(&hi)) = (distinct.first(), distinct.last()) {
            if (hi - lo) as usize + 1 != distinct.len() {
                return Err(Error::InvalidBatch(format!(
                    "labels are not a contiguous range ({} ids in {lo}..={hi})",
                    distinct.len()
                )));
            }
        }
        let normalized = features.nrows() > 0
            && features
                .axis_iter(Axis(0))
                .all(|r| (norm(r) - 1.0).abs() <= UNIT_TOL);
        Ok(FeatureBatch {
            features,
            labels,
            normalized,
        })
    }

    /// Rows drawn from a valid batch; labels may skip ids.
    pub(crate) fn from_subset(features: Array2<f64>, labels: Vec<u32>) -> Self {
        let normalized = features.nrows() > 0
            && features
                .axis_iter(Axis(0))
                .all(|r| (norm(r) - 1.0).abs() <= UNIT_TOL);
        FeatureBatch {
            features,
            labels,
            normalized,
        }
    }

    pub fn empty(d: usize) -> Self {
        FeatureBatch {
            features: Array2::zeros((0, d)),
            labels: Vec::new(),
            normalized: false,
        }
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Distinct labels in increasing order.
    pub fn classes(&self) -> Vec<u32> {
        let set: std::collections::BTreeSet<u32> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Copy with every row scaled to unit norm.
    pub fn normalize(&self) -> Result<FeatureBatch> {
        let mut f = self.features.clone();
        for (i, mut row) in f.axis_iter_mut(Axis(0)).enumerate() {
            let n = norm(row.view());
            if n == 0.0 {
                return Err(Error::InvalidBatch(format!("row {i} has zero norm")));
            }
            row /= n;
        }
        Ok(FeatureBatch {
            normalized: !self.is_empty(),
            features: f,
            labels: self.labels.clone(),
        })
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn select(&self, keep: impl Fn(u32) -> bool) -> Result<FeatureBatch> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        let f = self.features.select(Axis(0), &idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        FeatureBatch::new(f, labels)
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &FeatureBatch) -> Result<FeatureBatch> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidBatch(format!(
                "cannot concatenate dimensions {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let f = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .expect("matching widths");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        FeatureBatch::new(f, labels)
    }

    /// Per-class arithmetic mean of the stored rows, with counts.
    pub fn class_means(&self) -> BTreeMap<u32, (Array1<f64>, usize)> {
        let mut acc: BTreeMap<u32, (Array1<f64>, usize)> = BTreeMap::new();
        for (row, &y) in self.features.axis_iter(Axis(0)).zip(&self.labels) {
            let e = acc
                .entry(y)
                .or_insert_with(|| (Array1::zeros(self.dim()), 0));
            e.0 += &row;
            e.1 += 1;
        }
        for (sum, count) in acc.values_mut() {
            *sum /= *count as f64;
        }
        acc
    }
}

/// Entrywise `max(x, 0)`.
pub fn clamp_nonneg(a: ArrayView2<f64>) -> Array2<f64> {
    a.mapv(|x| x.max(0.0))
}
