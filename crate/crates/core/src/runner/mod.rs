//! The incremental protocol: base session, few-shot sessions, evaluation,
//! separability traces and the five-way ablation.

mod protocol;
mod stream;

pub use protocol::{ablation_suite, ablation_table, run_protocol, ProtocolReport, SessionRecord};
pub use stream::{
    stream_from_features, synthetic_stream, toy_image_stream, InputKind, LabeledInputs, SessionStream,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::{
    finetune, induce_simplex, train_ce, update_memory, ClassMemory, SimplexClassifier,
};
use crate::concepts::{build_concept_bank, ConceptBank};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::etf::{cosine, make_etf};
use crate::extractor::{
    extract, train_toy_extractor, FeatureBatch, FeatureExtractor, IdentityExtractor, PatchInput,
    ToyExtractor,
};
use crate::linalg::norm;

/// The ablation rows, from a plain learnable classifier to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Random rows trained with cross-entropy.
    #[serde(rename = "LearnableCE")]
    LearnableCe,
    /// Fixed simplex rows for every class, then cross-entropy.
    #[serde(rename = "NcCE")]
    NcCe,
    /// Fixed simplex rows, novel rows fine-tuned with the anchored loss.
    #[serde(rename = "NcEtf")]
    NcEtf,
    /// Concept-induced novel rows, no fine-tuning.
    #[serde(rename = "NcEtfCF")]
    NcEtfCf,
    /// Concept-induced novel rows fine-tuned with the memory.
    #[serde(rename = "MASIL")]
    Masil,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::LearnableCe,
        Variant::NcCe,
        Variant::NcEtf,
        Variant::NcEtfCf,
        Variant::Masil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LearnableCe => "LearnableCE",
            Variant::NcCe => "NcCE",
            Variant::NcEtf => "NcEtf",
            Variant::NcEtfCf => "NcEtfCF",
            Variant::Masil => "MASIL",
        }
    }

    pub fn uses_bank(self) -> bool {
        matches!(self, Variant::NcEtfCf | Variant::Masil)
    }

    pub fn uses_reserved(self) -> bool {
        matches!(self, Variant::NcCe | Variant::NcEtf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                Error::validation(
                    "variant",
                    format!("unknown variant {s:?} (expected one of LearnableCE, NcCE, NcEtf, NcEtfCF, MASIL)"),
                )
            })
    }
}

/// Frozen feature map of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Extractor {
    Identity(IdentityExtractor),
    Toy(ToyExtractor),
}

impl FeatureExtractor for Extractor {
    fn input_dim(&self) -> usize {
        match self {
            Extractor::Identity(e) => e.input_dim(),
            Extractor::Toy(e) => e.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Extractor::Identity(e) => e.output_dim(),
            Extractor::Toy(e) => e.output_dim(),
        }
    }

    fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Extractor::Identity(e) => e.forward(x),
            Extractor::Toy(e) => e.forward(x),
        }
    }

    fn jacobian(&self, x: ArrayView1<f64>) -> Array2<f64> {
        match self {
            Extractor::Identity(e) => e.jacobian(x),
            Extractor::Toy(e) => e.jacobian(x),
        }
    }
}

/// Everything carried from one session to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub variant: Variant,
    pub extractor: Extractor,
    pub classifier: SimplexClassifier,
    pub memory: ClassMemory,
    pub bank: Option<ConceptBank>,
    /// Rows waiting for future classes (reserved-vertex variants only).
    pub reserved: Option<Array2<f64>>,
    pub base_classes: usize,
    /// Sessions completed after the base session.
    pub session: usize,
}

impl PipelineState {
    pub fn seen_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn extractor_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    /// Extracts and unit-normalizes `inputs`.
    pub fn features(&self, inputs: &LabeledInputs) -> Result<FeatureBatch> {
        if inputs.is_empty() {
            return Ok(FeatureBatch::empty(self.extractor.output_dim()));
        }
        extract(&self.extractor, inputs.x.view(), inputs.labels.clone())?.normalize()
    }
}

/// splitmix64 of `seed + tag`: independent sub-seeds from one run seed.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_ANCHORS: u64 = 3;
const TAG_RESERVED: u64 = 4;
const TAG_EXTRACTOR: u64 = 5;
const TAG_PATCHES: u64 = 6;
const TAG_SOLVER: u64 = 7;
const TAG_ROWS: u64 = 100;
const TAG_TRAIN: u64 = 200;

fn random_rows(k: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive scale");
    Array2::from_shape_fn((k, d), |_| dist.sample(&mut rng))
}

fn unit_rows(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = a.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = norm(row.view());
        if n == 0.0 {
            return Err(Error::ZeroMean(i as u32));
        }
        row /= n;
    }
    Ok(out)
}

fn solver_options(cfg: &RunConfig) -> crate::solvers::SolverOptions {
    let mut o = cfg.solver;
    o.rng_seed = derive_seed(cfg.seed, TAG_SOLVER);
    o
}

/// Trains (or configures) and freezes the extractor, sets the base rows,
/// fills the memory with the base class means, and builds the concept bank
/// for the concept-induced variants.
pub fn run_base_session(stream: &SessionStream, cfg: &RunConfig, variant: Variant) -> Result<PipelineState> {
    stream.validate()?;
    let c0 = stream.base_classes;
    let d = cfg.stream.dim;
    let (extractor, toy_anchors) = match stream.kind {
        InputKind::Features => (
            Extractor::Identity(IdentityExtractor {
                dim: stream.input_width(),
            }),
            None,
        ),
        InputKind::Images { .. } => {
            let targets = make_etf(c0, d, derive_seed(cfg.seed, TAG_ANCHORS))?;
            let (ext, trace) = train_toy_extractor(
                stream.base.x.view(),
                &stream.base.labels,
                &targets,
                &cfg.toy.train_config(derive_seed(cfg.seed, TAG_EXTRACTOR)),
            )?;
            log::info!(
                "extractor trained: loss {:.4} -> {:.4}",
                trace.first().copied().unwrap_or(0.0),
                trace.last().copied().unwrap_or(0.0)
            );
            (Extractor::Toy(ext), Some(targets.vertices().clone()))
        }
    };
    let mut state = PipelineState {
        variant,
        extractor,
        classifier: SimplexClassifier::new(1, 1)?,
        memory: ClassMemory::default(),
        bank: None,
        reserved: None,
        base_classes: c0,
        session: 0,
    };
    let base = state.features(&stream.base)?;
    let dim = base.dim();

    let classifier = match variant {
        Variant::LearnableCe => {
            let w0 = random_rows(c0, dim, derive_seed(cfg.seed, TAG_ROWS));
            let mut ce = cfg.ce_base;
            ce.seed = derive_seed(cfg.seed, TAG_TRAIN);
            let (w, trace) = train_ce(&w0, &base, &ce)?;
            log::debug!("base cross-entropy {:.4} -> {:.4}", trace[0], trace[trace.len() - 1]);
            SimplexClassifier::from_anchor_rows(w.view(), cfg.layers)?
        }
        _ => {
            let anchors = match (&stream.base_anchors, toy_anchors) {
                (Some(a), _) => a.clone(),
                (None, Some(a)) => a,
                (None, None) => class_mean_rows(&base, c0)?,
            };
            if anchors.dim() != (c0, dim) {
                return Err(Error::ShapeMismatch(format!(
                    "base anchors are {:?}, expected ({c0}, {dim})",
                    anchors.dim()
                )));
            }
            SimplexClassifier::from_anchor_rows(anchors.view(), cfg.layers)?
        }
    };
    state.classifier = classifier;
    state.memory = update_memory(&ClassMemory::default(), &base)?;

    if variant.uses_bank() {
        let rank = cfg.bank.rank.unwrap_or_else(|| (2 * c0).min(dim / 2));
        let input = match stream.kind {
            InputKind::Features => PatchInput::Vectors(stream.base.x.view()),
            InputKind::Images { height, width } => PatchInput::Images {
                pixels: stream.base.x.view(),
                height,
                width,
            },
        };
        let bank = build_concept_bank(
            &state.extractor,
            input,
            &cfg.bank.patch_spec(derive_seed(cfg.seed, TAG_PATCHES)),
            rank,
            &solver_options(cfg),
        )?;
        log::info!("concept bank: rank {} of {rank}", bank.rank());
        state.bank = Some(bank);
    }
    if variant.uses_reserved() {
        let rows = match &stream.reserved {
            Some(r) => r.clone(),
            None => {
                let total = stream.total_classes();
                let g = make_etf(total, dim, derive_seed(cfg.seed, TAG_RESERVED))?;
                g.vertices().slice(s![c0.., ..]).to_owned()
            }
        };
        state.reserved = Some(rows);
    }
    Ok(state)
}

fn class_mean_rows(base: &FeatureBatch, c0: usize) -> Result<Array2<f64>> {
    let means = base.class_means();
    let mut rows = Array2::zeros((c0, base.dim()));
    for c in 0..c0 as u32 {
        let (m, _) = means.get(&c).ok_or(Error::EmptyClass(c))?;
        rows.row_mut(c as usize).assign(m);
    }
    unit_rows(rows.view())
}

/// Adds the rows of the classes in `session` and updates them according to
/// the variant, then adds the new class means to the memory. An empty
/// session leaves the state unchanged.
pub fn run_incremental_session(state: &PipelineState, session: &LabeledInputs, cfg: &RunConfig) -> Result<PipelineState> {
    if session.is_empty() {
        log::warn!("session {} has no samples; state unchanged", state.session + 1);
        return Ok(state.clone());
    }
    let seen = state.seen_classes() as u32;
    let classes = session.classes();
    if let Some(&c) = classes.iter().find(|&&c| c < seen) {
        return Err(Error::DuplicateClass(c));
    }
    if classes[0] != seen {
        return Err(Error::ClassGap(classes[0]));
    }
    let feats = state.features(session)?;
    let k = classes.len();
    let t = state.session as u64 + 1;
    let mut next = state.clone();
    let solver = solver_options(cfg);
    let mut ft = cfg.finetune;
    ft.seed = derive_seed(cfg.seed, TAG_TRAIN + t);
    let mut ce = cfg.ce_session;
    ce.seed = derive_seed(cfg.seed, TAG_TRAIN + t);

    match state.variant {
        Variant::LearnableCe | Variant::NcCe => {
            let rows = if state.variant == Variant::LearnableCe {
                random_rows(k, feats.dim(), derive_seed(cfg.seed, TAG_ROWS + t))
            } else {
                reserved_rows(state, seen as usize, k)?
            };
            next.classifier.append_rows(rows.view(), rows.view(), &vec![1.0; k])?;
            let data = state.memory.as_batch(feats.dim())?.concat(&feats)?;
            let (w, _) = train_ce(next.classifier.effective_w(), &data, &ce)?;
            next.classifier.set_effective_w(w)?;
        }
        Variant::NcEtf => {
            let rows = reserved_rows(state, seen as usize, k)?;
            next.classifier.append_rows(rows.view(), rows.view(), &vec![1.0; k])?;
            next.classifier = finetune(&next.classifier, &feats, &state.memory, &ft)?.0;
        }
        Variant::NcEtfCf | Variant::Masil => {
            let bank = state
                .bank
                .as_ref()
                .ok_or_else(|| Error::validation("bank", "concept-induced variant without a concept bank"))?;
            let induced = induce_simplex(bank, &feats, &solver)?;
            next.classifier
                .append_rows(induced.rows.view(), induced.rows.view(), &induced.raw_norms)?;
            if state.variant == Variant::Masil {
                next.classifier = finetune(&next.classifier, &feats, &state.memory, &ft)?.0;
            }
        }
    }
    next.memory = update_memory(&state.memory, &feats)?;
    next.session += 1;
    Ok(next)
}

fn reserved_rows(state: &PipelineState, seen: usize, k: usize) -> Result<Array2<f64>> {
    let reserved = state
        .reserved
        .as_ref()
        .ok_or_else(|| Error::validation("reserved", "reserved-vertex variant without reserved rows"))?;
    let lo = seen - state.base_classes;
    if lo + k > reserved.nrows() {
        return Err(Error::validation(
            "stream.sessions",
            format!("only {} reserved rows for {} incremental classes", reserved.nrows(), lo + k),
        ));
    }
    Ok(reserved.slice(s![lo..lo + k, ..]).to_owned())
}

/// Percentage of `test` rows predicted correctly.
pub fn evaluate(state: &PipelineState, test: &LabeledInputs) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidBatch("empty test set".into()));
    }
    let seen = state.seen_classes() as u32;
    if let Some(&y) = test.labels.iter().find(|&&y| y >= seen) {
        return Err(Error::UnknownLabel(y));
    }
    let feats = state.features(test)?;
    let pred = state.classifier.predict_batch(feats.features().view());
    let correct = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Mean over ordered pairs `k ≠ k'` of `cos(h̄_k, w_k')`, over every seen
/// class. `data` must contain every seen class.
pub fn cosine_analysis(state: &PipelineState, data: &FeatureBatch) -> Result<f64> {
    mean_cross_cosine(state.classifier.effective_w().view(), data)
}

pub(crate) fn mean_cross_cosine(w: ArrayView2<f64>, data: &FeatureBatch) -> Result<f64> {
    let k = w.nrows();
    if k < 2 {
        return Err(Error::validation("classes", "cosine analysis needs >= 2 classes"));
    }
    let means = data.class_means();
    let mut h = Vec::with_capacity(k);
    for c in 0..k as u32 {
        h.push(&means.get(&c).ok_or(Error::EmptyClass(c))?.0);
    }
    let mut sum = 0.0;
    for (i, hi) in h.iter().enumerate() {
        for j in 0..k {
            if i != j {
                sum += cosine(hi.view(), w.row(j));
            }
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}

/// Builds the session stream a configuration describes.
pub fn build_stream(cfg: &RunConfig) -> Result<SessionStream> {
    match cfg.mode {
        Mode::Synthetic => synthetic_stream(&cfg.stream, cfg.seed),
        Mode::ToyImages => toy_image_stream(&cfg.stream, &cfg.toy, cfg.seed),
        Mode::FeaturesFromFile => {
            let train = crate::io::load_features(cfg.features.train.as_deref().expect("validated"))?;
            let test = crate::io::load_features(cfg.features.test.as_deref().expect("validated"))?;
            stream_from_features(&train, &test, &cfg.stream)
        }
    }
}
