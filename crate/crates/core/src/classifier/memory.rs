use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureBatch;
use crate::linalg::norm;

const DEGENERATE_MEAN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    /// Unit-norm mean feature.
    pub mean: Array1<f64>,
    pub count: usize,
}

/// Stored unit-norm mean feature per seen class; no raw samples are kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMemory {
    pub entries: BTreeMap<u32, MemoryEntry>,
}

impl ClassMemory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: u32) -> Option<&MemoryEntry> {
        self.entries.get(&class)
    }

    /// Memory means as a batch (one row per class), in class order.
    pub fn as_batch(&self, d: usize) -> Result<FeatureBatch> {
        if self.entries.is_empty() {
            return Ok(FeatureBatch::empty(d));
        }
        let rows: Vec<_> = self.entries.values().map(|e| e.mean.view()).collect();
        let f = ndarray::stack(ndarray::Axis(0), &rows)
            .map_err(|e| Error::InvalidBatch(e.to_string()))?;
        FeatureBatch::new(f, self.entries.keys().copied().collect())
    }
}

/// Adds the renormalized class means of `batch` to `mem`. Every class in the
/// batch must be new.
pub fn update_memory(mem: &ClassMemory, batch: &FeatureBatch) -> Result<ClassMemory> {
    if batch.is_empty() {
        return Ok(mem.clone());
    }
    if !batch.normalized() {
        return Err(Error::InvalidBatch("memory update needs unit-norm features".into()));
    }
    let means = batch.class_means();
    if let Some(&c) = means.keys().find(|c| mem.entries.contains_key(c)) {
        return Err(Error::DuplicateClass(c));
    }
    let mut out = mem.clone();
    for (class, (mean, count)) in means {
        let n = norm(mean.view());
        if n < DEGENERATE_MEAN {
            return Err(Error::ZeroMean(class));
        }
        out.entries.insert(
            class,
            MemoryEntry {
                mean: mean / n,
                count,
            },
        );
    }
    Ok(out)
}
