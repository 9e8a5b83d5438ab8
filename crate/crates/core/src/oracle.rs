//! Seeded reference runs whose measured values become test fixtures.
//!
//! Each function is deterministic; [`generate`] collects them all so the
//! `oracle` command can rewrite the fixture file and tests can compare a
//! fresh run against it.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{finetune, induce_simplex, predict, update_memory, ClassMemory, SimplexClassifier};
use crate::concepts::{bank_similarity, ConceptBank};
use crate::config::RunConfig;
use crate::error::Result;
use crate::etf::{cosine, make_etf};
use crate::extractor::{synth_features, train_toy_extractor, SyntheticSpec, ToyTrainConfig};
use crate::runner::{
    ablation_suite, evaluate, run_base_session, run_incremental_session, run_protocol, synthetic_stream,
    ProtocolReport, Variant,
};
use crate::solvers::SolverOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFixtures {
    /// All five variants on the default stream.
    pub ablation: Vec<ProtocolReport>,
    /// MASIL on the default stream with σ = 0.
    pub noiseless_masil: ProtocolReport,
    /// Fine-tuning loss before and after, first session of the default stream.
    pub finetune_losses: [f64; 2],
    /// Accuracy before and after one 5-way 5-shot MASIL session.
    pub five_way_accuracy: [f64; 2],
    /// Bank similarity for planted near-orthogonal concepts.
    pub planted_bank_similarity: f64,
    /// Final loss of the toy extractor on two separable blobs.
    pub toy_blob_loss: f64,
    /// Vertex-classifier accuracy on σ = 0.1 synthetic features (fraction).
    pub synthetic_vertex_accuracy: f64,
    /// Smallest cosine between a σ = 0.1 class memory mean and its vertex.
    pub memory_vertex_cosine: f64,
}

pub fn default_ablation() -> Result<Vec<ProtocolReport>> {
    let cfg = RunConfig::default();
    ablation_suite(&synthetic_stream(&cfg.stream, cfg.seed)?, &cfg)
}

pub fn noiseless_masil() -> Result<ProtocolReport> {
    let mut cfg = RunConfig::default();
    cfg.stream.sigma = 0.0;
    run_protocol(&synthetic_stream(&cfg.stream, cfg.seed)?, &cfg, Variant::Masil)
}

/// Induced rows for the first session of the default stream, fine-tuned
/// with the default configuration.
pub fn finetune_losses() -> Result<[f64; 2]> {
    let cfg = RunConfig::default();
    let stream = synthetic_stream(&cfg.stream, cfg.seed)?;
    let state = run_base_session(&stream, &cfg, Variant::Masil)?;
    let feats = state.features(&stream.increments[0])?;
    let bank = state.bank.as_ref().expect("MASIL builds a bank");
    let induced = induce_simplex(bank, &feats, &cfg.solver)?;
    let mut c = state.classifier.clone();
    c.append_rows(induced.rows.view(), induced.rows.view(), &induced.raw_norms)?;
    let (_, trace) = finetune(&c, &feats, &state.memory, &cfg.finetune)?;
    Ok([trace[0], trace[trace.len() - 1]])
}

pub fn five_way_accuracy() -> Result<[f64; 2]> {
    let mut cfg = RunConfig::default();
    cfg.stream.ways = 5;
    cfg.stream.sessions = 1;
    let stream = synthetic_stream(&cfg.stream, cfg.seed)?;
    let base = run_base_session(&stream, &cfg, Variant::Masil)?;
    let before = evaluate(&base, &stream.test_set(0))?;
    let next = run_incremental_session(&base, &stream.increments[0], &cfg)?;
    Ok([before, evaluate(&next, &stream.test_set(1))?])
}

/// Four concepts on disjoint coordinate blocks of a 16-dimensional space,
/// plus a small shared offset; samples are random non-negative mixtures.
pub fn planted_bank_similarity() -> Result<f64> {
    let (v, d, n) = (4, 16, 60);
    let mut concepts = Array2::from_elem((v, d), 0.01);
    for c in 0..v {
        for j in 0..d / v {
            concepts[[c, c * (d / v) + j]] = 1.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mix = Array2::from_shape_fn((n, v), |_| rng.random_range(0.0..1.0));
    let a = mix.dot(&concepts);
    let bank = ConceptBank::from_activations(a.view(), v, &SolverOptions::default())?;
    bank_similarity(&bank)
}

/// Two Gaussian blobs in the plane pulled onto a two-vertex simplex.
pub fn toy_blob_loss() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 40;
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        let center = if (i < n / 2) == (j == 0) { 1.0 } else { -1.0 };
        center + 0.3 * rng.random_range(-1.0..1.0)
    });
    let labels: Vec<u32> = (0..n).map(|i| u32::from(i >= n / 2)).collect();
    let targets = make_etf(2, 2, 42)?;
    let (_, trace) = train_toy_extractor(x.view(), &labels, &targets, &ToyTrainConfig::default())?;
    Ok(trace[trace.len() - 1])
}

pub fn synthetic_vertex_accuracy() -> Result<f64> {
    let spec = SyntheticSpec::balanced(5, 8, 50, 0.1, 42);
    let batch = synth_features(&spec)?;
    let etf = make_etf(5, 8, 42)?;
    let c = SimplexClassifier::from_anchor_rows(etf.vertices().view(), 1)?;
    let correct = (0..batch.len())
        .filter(|&i| predict(&c, batch.row(i)) == batch.labels()[i])
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

pub fn memory_vertex_cosine() -> Result<f64> {
    let spec = SyntheticSpec::balanced(5, 8, 50, 0.1, 42);
    let batch = synth_features(&spec)?;
    let etf = make_etf(5, 8, 42)?;
    let mem = update_memory(&ClassMemory::default(), &batch)?;
    Ok(mem
        .entries
        .iter()
        .map(|(&c, e)| cosine(e.mean.view(), etf.vertices().row(c as usize)))
        .fold(f64::INFINITY, f64::min))
}

fn timed<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = std::time::Instant::now();
    let out = f()?;
    log::info!("{name}: {:.2?}", start.elapsed());
    Ok(out)
}

pub fn generate() -> Result<OracleFixtures> {
    Ok(OracleFixtures {
        toy_blob_loss: timed("toy blobs", toy_blob_loss)?,
        planted_bank_similarity: timed("planted bank", planted_bank_similarity)?,
        synthetic_vertex_accuracy: timed("vertex accuracy", synthetic_vertex_accuracy)?,
        memory_vertex_cosine: timed("memory cosine", memory_vertex_cosine)?,
        finetune_losses: timed("fine-tuning", finetune_losses)?,
        five_way_accuracy: timed("5-way session", five_way_accuracy)?,
        noiseless_masil: timed("noiseless MASIL", noiseless_masil)?,
        ablation: timed("ablation", default_ablation)?,
    })
}
