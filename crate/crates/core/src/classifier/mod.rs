//! Simplex classifier: induced rows for novel classes, class-mean memory and
//! anchored quadratic fine-tuning.

mod loss;
mod memory;

pub use loss::{ce_loss, cosine_lr, finetune, finetune_loss, train_ce, CeConfig, FinetuneConfig};
pub use memory::{update_memory, ClassMemory, MemoryEntry};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::concepts::{infer_coefficients_batch, ConceptBank};
use crate::error::{Error, Result};
use crate::etf::{argmax, EtfSimplex};
use crate::extractor::{clamp_nonneg, FeatureBatch};
use crate::linalg::norm;
use crate::solvers::SolverOptions;

/// One row per seen class. `effective_w` is what scores features;
/// `induced_targets` are the frozen anchors used by fine-tuning. With
/// `num_layers > 1` the rows are also kept as an elementwise (Hadamard)
/// factorization into `num_layers` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexClassifier {
    effective_w: Array2<f64>,
    induced_targets: Array2<f64>,
    layers: Option<Vec<Array2<f64>>>,
    num_layers: usize,
    feature_norm: bool,
    /// Norm of each induced row before unit normalization (1 for anchors).
    induced_scale: Vec<f64>,
}

impl SimplexClassifier {
    /// Empty classifier over `d`-dimensional features.
    pub fn new(d: usize, num_layers: usize) -> Result<Self> {
        if num_layers < 1 {
            return Err(Error::validation("classifier.layers", "must be >= 1"));
        }
        Ok(SimplexClassifier {
            effective_w: Array2::zeros((0, d)),
            induced_targets: Array2::zeros((0, d)),
            layers: (num_layers > 1).then(Vec::new),
            num_layers,
            feature_norm: true,
            induced_scale: Vec::new(),
        })
    }

    /// Classifier whose rows, and anchors, are `rows`.
    pub fn from_anchor_rows(rows: ArrayView2<f64>, num_layers: usize) -> Result<Self> {
        let mut c = SimplexClassifier::new(rows.ncols(), num_layers)?;
        c.append_rows(rows, rows, &vec![1.0; rows.nrows()])?;
        Ok(c)
    }

    /// Reassembles a stored classifier. Layers must be present exactly when
    /// `num_layers > 1` and must compose to `effective_w` within 1e−10.
    pub fn from_parts(
        effective_w: Array2<f64>,
        induced_targets: Array2<f64>,
        layers: Option<Vec<Array2<f64>>>,
        num_layers: usize,
        induced_scale: Vec<f64>,
    ) -> Result<Self> {
        if num_layers < 1 {
            return Err(Error::validation("classifier.layers", "must be >= 1"));
        }
        let dim = effective_w.dim();
        if induced_targets.dim() != dim || induced_scale.len() != dim.0 {
            return Err(Error::ShapeMismatch(format!(
                "rows {dim:?}, targets {:?}, {} scales",
                induced_targets.dim(),
                induced_scale.len()
            )));
        }
        match &layers {
            None if num_layers > 1 => {
                return Err(Error::validation("classifier.layers", "layer factors missing"));
            }
            Some(_) if num_layers == 1 => {
                return Err(Error::validation("classifier.layers", "unexpected layer factors"));
            }
            Some(ls) if ls.len() != num_layers || ls.iter().any(|l| l.dim() != dim) => {
                return Err(Error::ShapeMismatch(format!("expected {num_layers} factors of shape {dim:?}")));
            }
            _ => {}
        }
        let c = SimplexClassifier {
            effective_w,
            induced_targets,
            layers,
            num_layers,
            feature_norm: true,
            induced_scale,
        };
        let gap = (&c.compose() - &c.effective_w).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gap > 1e-10 * (1.0 + c.effective_w.iter().fold(0.0f64, |m, x| m.max(x.abs()))) {
            return Err(Error::validation("classifier.layers", "factors do not compose to the rows"));
        }
        Ok(c)
    }

    pub fn num_classes(&self) -> usize {
        self.effective_w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.effective_w.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn feature_norm(&self) -> bool {
        self.feature_norm
    }

    pub fn effective_w(&self) -> &Array2<f64> {
        &self.effective_w
    }

    pub fn induced_targets(&self) -> &Array2<f64> {
        &self.induced_targets
    }

    pub fn induced_scale(&self) -> &[f64] {
        &self.induced_scale
    }

    /// The `num_layers` factor matrices, present only when `num_layers > 1`.
    pub fn layers(&self) -> Option<&[Array2<f64>]> {
        self.layers.as_deref()
    }

    /// Appends rows for new classes; the starting weights and anchors may
    /// differ.
    pub fn append_rows(&mut self, weights: ArrayView2<f64>, targets: ArrayView2<f64>, scale: &[f64]) -> Result<()> {
        let d = self.dim();
        if weights.ncols() != d || targets.ncols() != d || weights.nrows() != targets.nrows() || scale.len() != weights.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "appending {}x{} rows with {}x{} targets to a {d}-dimensional classifier",
                weights.nrows(),
                weights.ncols(),
                targets.nrows(),
                targets.ncols()
            )));
        }
        self.effective_w = ndarray::concatenate(Axis(0), &[self.effective_w.view(), weights]).expect("widths checked");
        self.induced_targets = ndarray::concatenate(Axis(0), &[self.induced_targets.view(), targets]).expect("widths checked");
        self.induced_scale.extend_from_slice(scale);
        self.resplit();
        Ok(())
    }

    /// Replaces the effective rows (same shape) and re-splits layers.
    pub fn set_effective_w(&mut self, w: Array2<f64>) -> Result<()> {
        if w.dim() != self.effective_w.dim() {
            return Err(Error::ShapeMismatch(format!(
                "expected {:?}, got {:?}",
                self.effective_w.dim(),
                w.dim()
            )));
        }
        self.effective_w = w;
        self.resplit();
        Ok(())
    }

    /// Elementwise product of the layer factors (equals `effective_w` up to
    /// round-off).
    pub fn compose(&self) -> Array2<f64> {
        match &self.layers {
            None => self.effective_w.clone(),
            Some(layers) => layers.iter().skip(1).fold(layers[0].clone(), |acc, l| acc * l),
        }
    }

    fn resplit(&mut self) {
        if self.num_layers == 1 {
            return;
        }
        let (k, d) = self.effective_w.dim();
        let mut layers = vec![Array2::zeros((k, d)); self.num_layers];
        for (r, row) in self.effective_w.axis_iter(Axis(0)).enumerate() {
            for (l, part) in split_layers(row, self.num_layers).into_iter().enumerate() {
                layers[l].row_mut(r).assign(&part);
            }
        }
        self.layers = Some(layers);
    }

    /// Class scores `W·h`.
    pub fn logits(&self, h: ArrayView1<f64>) -> Array1<f64> {
        self.effective_w.dot(&h)
    }

    /// Class ids for all rows of `features`.
    pub fn predict_batch(&self, features: ArrayView2<f64>) -> Vec<u32> {
        let scores = features.dot(&self.effective_w.t());
        scores.axis_iter(Axis(0)).map(|s| argmax(s) as u32).collect()
    }
}

/// Argmax of `W·h`, ties to the lowest class id.
pub fn predict(classifier: &SimplexClassifier, h: ArrayView1<f64>) -> u32 {
    argmax(classifier.logits(h).view()) as u32
}

/// Splits `w` into `num_layers` factors whose elementwise product is `w`:
/// the first carries the sign, `sign(w)|w|^{1/L}`, the rest are `|w|^{1/L}`.
pub fn split_layers(w: ArrayView1<f64>, num_layers: usize) -> Vec<Array1<f64>> {
    if num_layers <= 1 {
        return vec![w.to_owned()];
    }
    let inv = 1.0 / num_layers as f64;
    let root = w.mapv(|x| x.abs().powf(inv));
    let mut out = vec![&root * &w.mapv(f64::signum)];
    // signum(0) is 1 in Rust, but the root is 0 there, so the product is 0
    out.extend(std::iter::repeat_n(root, num_layers - 1));
    out
}

/// Base classifier: rows and anchors are the simplex vertices.
pub fn base_simplex(etf: &EtfSimplex) -> SimplexClassifier {
    SimplexClassifier::from_anchor_rows(etf.vertices().view(), 1).expect("one layer is valid")
}

/// Rows induced from the concept bank for each class of `few_shot`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedRows {
    pub classes: Vec<u32>,
    /// Unit-norm rows, one per class in `classes`.
    pub rows: Array2<f64>,
    /// Norm of each row before normalization.
    pub raw_norms: Vec<f64>,
}

/// For each class: average the concept coefficients of its (clamped)
/// samples, map back through the bank, and normalize to unit length.
pub fn induce_simplex(bank: &ConceptBank, few_shot: &FeatureBatch, opts: &SolverOptions) -> Result<InducedRows> {
    if few_shot.dim() != bank.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have dimension {}, bank has {}",
            few_shot.dim(),
            bank.dim()
        )));
    }
    let classes = few_shot.classes();
    let a = clamp_nonneg(few_shot.features().view());
    let p = infer_coefficients_batch(bank, a.view(), opts)?;
    let mut rows = Array2::zeros((classes.len(), bank.dim()));
    let mut raw_norms = Vec::with_capacity(classes.len());
    for (k, &c) in classes.iter().enumerate() {
        let idx: Vec<usize> = (0..few_shot.len()).filter(|&i| few_shot.labels()[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let mean_p = p.select(Axis(0), &idx).mean_axis(Axis(0)).expect("non-empty");
        let w = mean_p.dot(bank.q());
        let n = norm(w.view());
        if n == 0.0 {
            return Err(Error::ZeroMean(c));
        }
        rows.row_mut(k).assign(&(w / n));
        raw_norms.push(n);
    }
    Ok(InducedRows {
        classes,
        rows,
        raw_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::BankStats;
    use crate::etf::{make_etf, verify_etf};
    use ndarray::array;
    use proptest::prelude::*;

    fn bank(q: Array2<f64>) -> ConceptBank {
        ConceptBank::from_parts(
            q,
            BankStats {
                objective_trace: vec![],
                seeds: vec![],
                chosen_restart: 0,
                restart_objectives: vec![],
                requested_rank: 0,
                pruned_rows: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn split_examples() {
        let l = split_layers(array![4.0, 9.0].view(), 2);
        assert_eq!(l, vec![array![2.0, 3.0], array![2.0, 3.0]]);
        assert_eq!(split_layers(array![1.5, -2.0].view(), 1), vec![array![1.5, -2.0]]);
        let l = split_layers(array![-4.0].view(), 2);
        assert_eq!(l, vec![array![-2.0], array![2.0]]);
    }

    proptest! {
        #[test]
        fn split_compose_identity(w in proptest::collection::vec(-10.0f64..10.0, 1..8), layers in 1usize..5) {
            let w = Array1::from(w);
            let parts = split_layers(w.view(), layers);
            let prod = parts.iter().skip(1).fold(parts[0].clone(), |a, p| a * p);
            for (x, y) in prod.iter().zip(w.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn predict_scale_invariant(h in proptest::collection::vec(-1.0f64..1.0, 4), s in 0.01f64..100.0) {
            let c = base_simplex(&make_etf(5, 4, 1).unwrap());
            let h = Array1::from(h);
            prop_assert_eq!(predict(&c, h.view()), predict(&c, (&h * s).view()));
        }
    }

    #[test]
    fn base_rows_are_vertices() {
        let e = make_etf(3, 5, 2).unwrap();
        let c = base_simplex(&e);
        assert!(verify_etf(c.effective_w().view(), 1e-9).pass);
        assert_eq!(c.induced_targets(), e.vertices());
        for k in 0..3 {
            assert!((c.effective_w().row(k).dot(&e.vertices().row(k)) - 1.0).abs() < 1e-9);
            assert_eq!(predict(&c, e.vertices().row(k)), k as u32);
        }
    }

    #[test]
    fn tie_goes_to_lowest() {
        let c = SimplexClassifier::from_anchor_rows(array![[1.0, 0.0], [0.0, 1.0]].view(), 1).unwrap();
        assert_eq!(predict(&c, array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn layered_rows_reconstruct() {
        let mut c = SimplexClassifier::from_anchor_rows(array![[1.0, -0.5], [0.2, 0.3]].view(), 3).unwrap();
        c.set_effective_w(array![[-2.0, 0.7], [0.0, 5.0]]).unwrap();
        let diff = &c.compose() - c.effective_w();
        assert!(diff.iter().all(|x| x.abs() < 1e-10));
        assert_eq!(c.layers().unwrap().len(), 3);
    }

    #[test]
    fn induce_single_and_pair() {
        let q = array![[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let b = bank(q);
        let opts = SolverOptions::default();
        let one = FeatureBatch::new(array![[2.0, 0.0, 0.0]], vec![5]).unwrap();
        let r = induce_simplex(&b, &one, &opts).unwrap();
        assert_eq!(r.classes, vec![5]);
        assert!((r.rows[[0, 0]] - 1.0).abs() < 1e-12);
        let pair = FeatureBatch::new(array![[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![0, 0]).unwrap();
        let r = induce_simplex(&b, &pair, &opts).unwrap();
        // (q1 + q2)/2 = [1, 0.5, 0]
        let n = 1.25f64.sqrt();
        assert!((r.rows[[0, 0]] - 1.0 / n).abs() < 1e-12 && (r.rows[[0, 1]] - 0.5 / n).abs() < 1e-12);
        assert!((r.raw_norms[0] - n).abs() < 1e-12);
    }
}
