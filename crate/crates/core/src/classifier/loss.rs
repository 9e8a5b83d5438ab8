use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassMemory, SimplexClassifier};
use crate::error::{Error, Result, SolverError};
use crate::extractor::FeatureBatch;

/// Ratio between the final and the initial learning rate of the schedule.
const LR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Anchor weight α ∈ [0, 1].
    pub alpha: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Mini-batch sampling seed; set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            alpha: 0.5,
            lr: 0.25,
            iterations: 100,
            batch_size: 64,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation("finetune.alpha", "must be in [0, 1]"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::validation("finetune.lr", "must be >= 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("finetune.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr` at step 0 to `lr·1e−2` at step `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    let floor = lr * LR_FLOOR;
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn check_rows(w: ArrayView2<f64>, labels: impl Iterator<Item = u32>) -> Result<()> {
    for y in labels {
        if y as usize >= w.nrows() {
            return Err(Error::MissingRow(y));
        }
    }
    Ok(())
}

/// Anchored quadratic loss and its exact gradient with respect to `w`:
///
/// `(1/|D|)Σ_i (w_{y_i}·h_i − 1)² + (1/|M|)Σ_c (w_c·M_c − 1)² + αΣ_k ‖w_k − ŵ_k‖²`
///
/// Empty batch or memory terms contribute zero.
pub fn finetune_loss(
    w: ArrayView2<f64>,
    batch: &FeatureBatch,
    mem: &ClassMemory,
    targets: ArrayView2<f64>,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    if targets.dim() != w.dim() {
        return Err(Error::MissingRow(w.nrows().min(targets.nrows()) as u32));
    }
    check_rows(w, batch.labels().iter().copied())?;
    check_rows(w, mem.entries.keys().copied())?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(w.dim());

    if !batch.is_empty() {
        let scale = 1.0 / batch.len() as f64;
        for (h, &y) in batch.features().axis_iter(Axis(0)).zip(batch.labels()) {
            let r = w.row(y as usize).dot(&h) - 1.0;
            loss += scale * r * r;
            grad.row_mut(y as usize).scaled_add(2.0 * scale * r, &h);
        }
    }
    if !mem.is_empty() {
        let scale = 1.0 / mem.len() as f64;
        for (&c, e) in &mem.entries {
            let r = w.row(c as usize).dot(&e.mean) - 1.0;
            loss += scale * r * r;
            grad.row_mut(c as usize).scaled_add(2.0 * scale * r, &e.mean);
        }
    }
    let diff = &w - &targets;
    loss += alpha * diff.iter().map(|x| x * x).sum::<f64>();
    grad.scaled_add(2.0 * alpha, &diff);
    Ok((loss, grad))
}

/// Mean softmax cross-entropy of logits `W·h` and its exact gradient.
pub fn ce_loss(w: ArrayView2<f64>, batch: &FeatureBatch) -> Result<(f64, Array2<f64>)> {
    check_rows(w, batch.labels().iter().copied())?;
    let mut grad = Array2::zeros(w.dim());
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (h, &y) in batch.features().axis_iter(Axis(0)).zip(batch.labels()) {
        let z = w.dot(&h);
        let zmax = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = z.mapv(|v| (v - zmax).exp());
        let total = e.sum();
        loss += scale * (total.ln() + zmax - z[y as usize]);
        for k in 0..w.nrows() {
            let p = e[k] / total - if k == y as usize { 1.0 } else { 0.0 };
            grad.row_mut(k).scaled_add(scale * p, &h);
        }
    }
    Ok((loss, grad))
}

fn minibatch(batch: &FeatureBatch, size: usize, rng: &mut ChaCha8Rng) -> Result<FeatureBatch> {
    if size >= batch.len() {
        return Ok(batch.clone());
    }
    let mut idx = sample(rng, batch.len(), size).into_vec();
    idx.sort_unstable();
    let f = batch.features().select(Axis(0), &idx);
    let labels = idx.iter().map(|&i| batch.labels()[i]).collect();
    // a random subset may skip label ids, which the public constructor rejects
    Ok(FeatureBatch::from_subset(f, labels))
}

/// Gradient descent on [`finetune_loss`] over the effective rows, with
/// cosine-annealed step size and seeded mini-batches of the session data
/// (full batch when `batch_size` covers it). The memory and anchor terms
/// are used in full at every step. Returns the updated classifier and the
/// full-data loss before every step and after the last.
pub fn finetune(
    classifier: &SimplexClassifier,
    session: &FeatureBatch,
    mem: &ClassMemory,
    cfg: &FinetuneConfig,
) -> Result<(SimplexClassifier, Vec<f64>)> {
    cfg.validate()?;
    let targets = classifier.induced_targets().clone();
    let mut w = classifier.effective_w().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for step in 0..=cfg.iterations {
        let (full, full_grad) = finetune_loss(w.view(), session, mem, targets.view(), cfg.alpha)?;
        if !full.is_finite() {
            return Err(SolverError::Divergence(format!("fine-tuning loss non-finite at step {step}")).into());
        }
        trace.push(full);
        if step == cfg.iterations {
            break;
        }
        let grad = if cfg.batch_size >= session.len() {
            full_grad
        } else {
            let mb = minibatch(session, cfg.batch_size, &mut rng)?;
            finetune_loss(w.view(), &mb, mem, targets.view(), cfg.alpha)?.1
        };
        w.scaled_add(-cosine_lr(cfg.lr, step, cfg.iterations), &grad);
    }
    let mut out = classifier.clone();
    out.set_effective_w(w)?;
    Ok((out, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Mini-batch sampling seed; set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CeConfig {
    fn default() -> Self {
        CeConfig {
            lr: 1.0,
            iterations: 100,
            batch_size: 64,
            seed: 42,
        }
    }
}

impl CeConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::validation(format!("{prefix}.lr"), "must be >= 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation(format!("{prefix}.batch_size"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Cross-entropy gradient descent on every row of `w`, with the same
/// schedule and batching as [`finetune`]. Returns the rows and the
/// full-data loss trace.
pub fn train_ce(w: &Array2<f64>, data: &FeatureBatch, cfg: &CeConfig) -> Result<(Array2<f64>, Vec<f64>)> {
    cfg.validate("ce")?;
    let mut w = w.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for step in 0..=cfg.iterations {
        let (full, full_grad) = ce_loss(w.view(), data)?;
        if !full.is_finite() {
            return Err(SolverError::Divergence(format!("cross-entropy non-finite at step {step}")).into());
        }
        trace.push(full);
        if step == cfg.iterations {
            break;
        }
        let grad = if cfg.batch_size >= data.len() {
            full_grad
        } else {
            ce_loss(w.view(), &minibatch(data, cfg.batch_size, &mut rng)?)?.1
        };
        w.scaled_add(-cosine_lr(cfg.lr, step, cfg.iterations), &grad);
    }
    Ok((w, trace))
}
