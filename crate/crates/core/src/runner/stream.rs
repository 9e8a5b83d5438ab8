use std::collections::BTreeSet;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::config::{StreamConfig, ToyConfig};
use crate::error::{Error, Result};
use crate::etf::make_etf;
use crate::extractor::{sample_around, FeatureBatch};

/// Whether stream rows are feature vectors or row-major images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    Features,
    Images { height: usize, width: usize },
}

/// Raw inputs (features or images) with one label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInputs {
    pub x: Array2<f64>,
    pub labels: Vec<u32>,
}

impl LabeledInputs {
    pub fn empty(width: usize) -> Self {
        LabeledInputs {
            x: Array2::zeros((0, width)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Rows whose label satisfies `keep`.
    pub fn select(&self, keep: impl Fn(u32) -> bool) -> LabeledInputs {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        LabeledInputs {
            x: self.x.select(Axis(0), &idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

impl From<FeatureBatch> for LabeledInputs {
    fn from(b: FeatureBatch) -> Self {
        LabeledInputs {
            labels: b.labels().to_vec(),
            x: b.features().clone(),
        }
    }
}

/// A base session followed by `increments.len()` few-shot sessions over
/// disjoint label ranges, plus one test pool covering every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStream {
    pub kind: InputKind,
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    pub base: LabeledInputs,
    pub increments: Vec<LabeledInputs>,
    pub test: LabeledInputs,
    /// Base classifier rows for the fixed-simplex variants; derived from the
    /// base data when absent.
    pub base_anchors: Option<Array2<f64>>,
    /// Rows assigned to incremental classes by the reserved-vertex variants,
    /// one per class in stream order; drawn from a fresh simplex when absent.
    pub reserved: Option<Array2<f64>>,
}

impl SessionStream {
    pub fn sessions(&self) -> usize {
        self.increments.len()
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.sessions() * self.ways
    }

    /// Classes seen once session `t` (0 = base) has been learned.
    pub fn classes_after(&self, t: usize) -> usize {
        self.base_classes + t * self.ways
    }

    /// Test rows of every class seen once session `t` is learned.
    pub fn test_set(&self, t: usize) -> LabeledInputs {
        let seen = self.classes_after(t) as u32;
        self.test.select(|y| y < seen)
    }

    pub fn input_width(&self) -> usize {
        self.base.x.ncols()
    }

    /// Label ranges are disjoint and consecutive, and every incremental
    /// class has exactly `shots` rows.
    pub fn validate(&self) -> Result<()> {
        let width = self.input_width();
        if self.base_classes < 2 {
            return Err(Error::validation("stream.base_classes", "base session needs >= 2 classes"));
        }
        let expected: Vec<u32> = (0..self.base_classes as u32).collect();
        if self.base.classes() != expected {
            return Err(Error::validation(
                "stream.base",
                format!("base labels must be exactly 0..{}", self.base_classes),
            ));
        }
        for (t, inc) in self.increments.iter().enumerate() {
            if inc.x.ncols() != width {
                return Err(Error::ShapeMismatch(format!(
                    "session {} has width {}, base has {width}",
                    t + 1,
                    inc.x.ncols()
                )));
            }
            if inc.is_empty() {
                continue;
            }
            let lo = self.classes_after(t) as u32;
            let want: Vec<u32> = (lo..lo + self.ways as u32).collect();
            let got = inc.classes();
            if let Some(&c) = got.iter().find(|&&c| c < lo) {
                return Err(Error::DuplicateClass(c));
            }
            if got != want {
                return Err(Error::validation(
                    format!("stream.increments[{}]", t + 1),
                    format!("expected classes {want:?}, found {got:?}"),
                ));
            }
            for c in got {
                let n = inc.labels.iter().filter(|&&y| y == c).count();
                if n != self.shots {
                    return Err(Error::validation(
                        "stream.shots",
                        format!("class {c} has {n} shots, expected {}", self.shots),
                    ));
                }
            }
        }
        if self.test.x.ncols() != width {
            return Err(Error::ShapeMismatch(format!(
                "test set has width {}, base has {width}",
                self.test.x.ncols()
            )));
        }
        let total = self.total_classes() as u32;
        if let Some(&y) = self.test.labels.iter().find(|&&y| y >= total) {
            return Err(Error::UnknownLabel(y));
        }
        Ok(())
    }
}

/// Every class sits at a vertex of one simplex over all classes; samples are
/// unit-norm noisy copies of their vertex. The reserved rows are the
/// incremental vertices rotated away from the data, so a fixed-simplex
/// classifier does not start aligned with the novel classes.
pub fn synthetic_stream(cfg: &StreamConfig, seed: u64) -> Result<SessionStream> {
    let k = cfg.total_classes();
    let g = make_etf(k, cfg.dim, seed)?;
    let c0 = cfg.base_classes;
    let centers = g.vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    rng.set_stream(2);
    let base = sample_around(centers.slice(s![..c0, ..]), &vec![cfg.base_train_per_class; c0], 0, cfg.sigma, &mut rng)?;
    let mut increments = Vec::with_capacity(cfg.sessions);
    for t in 0..cfg.sessions {
        rng.set_stream(3 + t as u64);
        let lo = c0 + t * cfg.ways;
        let b = sample_around(
            centers.slice(s![lo..lo + cfg.ways, ..]),
            &vec![cfg.shots; cfg.ways],
            lo as u32,
            cfg.sigma,
            &mut rng,
        )?;
        increments.push(b.into());
    }
    rng.set_stream(1);
    let test = sample_around(centers.view(), &vec![cfg.test_per_class; k], 0, cfg.sigma, &mut rng)?;

    let rotated = g.rotate_tail(c0, derive_seed(seed, 1));
    Ok(SessionStream {
        kind: InputKind::Features,
        base_classes: c0,
        ways: cfg.ways,
        shots: cfg.shots,
        base: base.into(),
        increments,
        test: test.into(),
        base_anchors: Some(centers.slice(s![..c0, ..]).to_owned()),
        reserved: Some(rotated.vertices().slice(s![c0.., ..]).to_owned()),
    })
}

/// `side × side` images: each class has a random prototype and samples add
/// independent pixel noise. Pixels are scaled by `1/side` so images have
/// roughly unit norm.
pub fn toy_image_stream(cfg: &StreamConfig, toy: &ToyConfig, seed: u64) -> Result<SessionStream> {
    let k = cfg.total_classes();
    let m = toy.side * toy.side;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let scale = 1.0 / toy.side as f64;
    let protos = Array2::from_shape_fn((k, m), |_| scale * rng.sample::<f64, _>(StandardNormal));

    let draw = |classes: std::ops::Range<usize>, per: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        rng.set_stream(stream);
        let n = classes.len() * per;
        let mut x = Array2::zeros((n, m));
        let mut labels = Vec::with_capacity(n);
        let mut r = 0;
        for c in classes {
            for _ in 0..per {
                for j in 0..m {
                    let e: f64 = rng.sample(StandardNormal);
                    x[[r, j]] = protos[[c, j]] + scale * toy.noise * e;
                }
                labels.push(c as u32);
                r += 1;
            }
        }
        LabeledInputs { x, labels }
    };
    let c0 = cfg.base_classes;
    let base = draw(0..c0, cfg.base_train_per_class, 2);
    let increments = (0..cfg.sessions)
        .map(|t| {
            let lo = c0 + t * cfg.ways;
            draw(lo..lo + cfg.ways, cfg.shots, 3 + t as u64)
        })
        .collect();
    let test = draw(0..k, cfg.test_per_class, 1);
    Ok(SessionStream {
        kind: InputKind::Images {
            height: toy.side,
            width: toy.side,
        },
        base_classes: c0,
        ways: cfg.ways,
        shots: cfg.shots,
        base,
        increments,
        test,
        base_anchors: None,
        reserved: None,
    })
}

/// Splits labelled feature files into sessions: classes below
/// `base_classes` form the base session (all rows), each following block of
/// `ways` classes forms one session using the first `shots` rows per class.
pub fn stream_from_features(train: &FeatureBatch, test: &FeatureBatch, cfg: &StreamConfig) -> Result<SessionStream> {
    if train.dim() != test.dim() {
        return Err(Error::ShapeMismatch(format!(
            "train features have dimension {}, test {}",
            train.dim(),
            test.dim()
        )));
    }
    let c0 = cfg.base_classes as u32;
    let classes = train.classes();
    if classes.first() != Some(&0) {
        return Err(Error::validation("features.train", "labels must start at 0"));
    }
    let total = cfg.total_classes() as u32;
    if (classes.len() as u32) < total {
        return Err(Error::validation(
            "features.train",
            format!("has {} classes, stream needs {total}", classes.len()),
        ));
    }
    let base = train.select(|y| y < c0)?;
    let mut increments = Vec::with_capacity(cfg.sessions);
    for t in 0..cfg.sessions {
        let lo = c0 + (t * cfg.ways) as u32;
        let mut idx = Vec::new();
        for c in lo..lo + cfg.ways as u32 {
            let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] == c).collect();
            if rows.len() < cfg.shots {
                return Err(Error::validation(
                    "stream.shots",
                    format!("class {c} has only {} training rows", rows.len()),
                ));
            }
            idx.extend_from_slice(&rows[..cfg.shots]);
        }
        increments.push(LabeledInputs {
            x: train.features().select(Axis(0), &idx),
            labels: idx.iter().map(|&i| train.labels()[i]).collect(),
        });
    }
    Ok(SessionStream {
        kind: InputKind::Features,
        base_classes: cfg.base_classes,
        ways: cfg.ways,
        shots: cfg.shots,
        base: base.into(),
        increments,
        test: test.select(|y| y < total)?.into(),
        base_anchors: None,
        reserved: None,
    })
}
