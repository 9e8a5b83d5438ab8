use std::path::Path;

use masil::config::RunConfig;
use masil::oracle::{self, OracleFixtures};
use masil::runner::{
    ablation_suite, ablation_table, run_base_session, run_incremental_session, run_protocol, synthetic_stream,
    Variant,
};

fn fixtures() -> OracleFixtures {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn small_oracles_match_fixtures() {
    let f = fixtures();
    assert_eq!(oracle::synthetic_vertex_accuracy().unwrap(), f.synthetic_vertex_accuracy);
    assert_eq!(f.synthetic_vertex_accuracy, 1.0);
    assert_eq!(oracle::memory_vertex_cosine().unwrap(), f.memory_vertex_cosine);
    assert!(f.memory_vertex_cosine >= 0.99);
    assert_eq!(oracle::toy_blob_loss().unwrap(), f.toy_blob_loss);
    assert!(f.toy_blob_loss <= 0.05);
}

#[test]
fn finetuning_lowers_the_loss() {
    let f = fixtures();
    let fresh = oracle::finetune_losses().unwrap();
    assert_eq!(fresh, f.finetune_losses);
    assert!(fresh[1] < fresh[0]);
}

#[test]
fn five_way_session_stays_within_bound() {
    let f = fixtures();
    let fresh = oracle::five_way_accuracy().unwrap();
    assert_eq!(fresh, f.five_way_accuracy);
    let drop = fresh[0] - fresh[1];
    assert!(drop <= f.five_way_accuracy[0] - f.five_way_accuracy[1]);
}

#[test]
fn noiseless_masil_matches_fixture() {
    let f = fixtures();
    let fresh = oracle::noiseless_masil().unwrap();
    assert_eq!(fresh, f.noiseless_masil);
    assert!(fresh.per_session_accuracy.iter().all(|&a| a == 100.0));
}

#[test]
fn ablation_rows_and_invariants() {
    let cfg = RunConfig::default();
    let stream = synthetic_stream(&cfg.stream, cfg.seed).unwrap();
    let reports = ablation_suite(&stream, &cfg).unwrap();
    assert_eq!(reports, fixtures().ablation);
    let t = cfg.stream.sessions;
    for r in &reports {
        assert_eq!(r.per_session_accuracy.len(), t + 1);
        let mean = r.per_session_accuracy.iter().sum::<f64>() / (t + 1) as f64;
        assert_eq!(r.average_accuracy, mean);
        assert!(r.per_session_accuracy.iter().all(|a| (0.0..=100.0).contains(a)));
        assert!(r.cosine_train.iter().chain(&r.cosine_test).all(|c| (-1.0..=1.0).contains(c)));
        let seen: Vec<usize> = r.sessions.iter().map(|s| s.classes_seen).collect();
        assert!(seen.windows(2).all(|w| w[1] == w[0] + cfg.stream.ways));
        assert_eq!(r.baseline, Some(Variant::LearnableCe));
    }
    let table = ablation_table(&reports);
    assert_eq!(table.lines().count(), 6);
    assert!(table.lines().next().unwrap().contains("final") && table.contains("average"));
}

#[test]
fn protocol_is_deterministic_per_seed() {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.stream.sessions = 2;
    let a = run_protocol(&synthetic_stream(&cfg.stream, cfg.seed).unwrap(), &cfg, Variant::Masil).unwrap();
    let b = run_protocol(&synthetic_stream(&cfg.stream, cfg.seed).unwrap(), &cfg, Variant::Masil).unwrap();
    assert_eq!(masil::io::report_json(&a), masil::io::report_json(&b));
    cfg.seed = 8;
    let c = run_protocol(&synthetic_stream(&cfg.stream, cfg.seed).unwrap(), &cfg, Variant::Masil).unwrap();
    assert_ne!(a, c);
}

#[test]
fn skipping_finetune_is_the_only_difference() {
    let cfg = RunConfig::default();
    let stream = synthetic_stream(&cfg.stream, cfg.seed).unwrap();
    let cf = run_base_session(&stream, &cfg, Variant::NcEtfCf).unwrap();
    let full = run_base_session(&stream, &cfg, Variant::Masil).unwrap();
    assert_eq!(cf.classifier, full.classifier);
    assert_eq!(cf.bank, full.bank);
    let cf = run_incremental_session(&cf, &stream.increments[0], &cfg).unwrap();
    let full = run_incremental_session(&full, &stream.increments[0], &cfg).unwrap();
    assert_eq!(cf.classifier.induced_targets(), full.classifier.induced_targets());
    assert_eq!(cf.classifier.effective_w(), cf.classifier.induced_targets());
    assert_ne!(full.classifier.effective_w(), full.classifier.induced_targets());
    assert_eq!(cf.memory, full.memory);
}
