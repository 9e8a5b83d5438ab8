use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cosine_analysis, evaluate, run_base_session, run_incremental_session, SessionStream, Variant};
use crate::config::RunConfig;
use crate::error::Result;

/// Measurements after one session (0 = base).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub classes_seen: usize,
    /// Percentage of the cumulative test set classified correctly.
    pub accuracy: f64,
    /// Mean cross-class cosine between stored class means and rows.
    pub cos_train: f64,
    /// The same on the cumulative test set.
    pub cos_test: f64,
}

/// Per-session accuracy and separability of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub variant: Variant,
    pub sessions: Vec<SessionRecord>,
    pub per_session_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    /// Final accuracy minus the baseline's final accuracy, in points.
    pub relative_improvement: Option<f64>,
    pub baseline: Option<Variant>,
    pub cosine_train: Vec<f64>,
    pub cosine_test: Vec<f64>,
}

impl ProtocolReport {
    fn from_records(variant: Variant, sessions: Vec<SessionRecord>) -> Self {
        let acc: Vec<f64> = sessions.iter().map(|r| r.accuracy).collect();
        ProtocolReport {
            variant,
            average_accuracy: acc.iter().sum::<f64>() / acc.len() as f64,
            per_session_accuracy: acc,
            relative_improvement: None,
            baseline: None,
            cosine_train: sessions.iter().map(|r| r.cos_train).collect(),
            cosine_test: sessions.iter().map(|r| r.cos_test).collect(),
            sessions,
        }
    }

    pub fn final_accuracy(&self) -> f64 {
        *self.per_session_accuracy.last().expect("at least the base session")
    }

    /// Records the improvement of this run's final accuracy over `baseline`.
    pub fn compare_to(&mut self, baseline: &ProtocolReport) {
        self.relative_improvement = Some(self.final_accuracy() - baseline.final_accuracy());
        self.baseline = Some(baseline.variant);
    }

    /// One CSV row per session.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("session,classes_seen,accuracy,cos_train,cos_test\n");
        for r in &self.sessions {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.session, r.classes_seen, r.accuracy, r.cos_train, r.cos_test
            )
            .expect("writing to a string");
        }
        out
    }
}

fn record(state: &super::PipelineState, stream: &SessionStream, t: usize) -> Result<SessionRecord> {
    let test = stream.test_set(t);
    let train = state.memory.as_batch(state.extractor_dim())?;
    Ok(SessionRecord {
        session: t,
        classes_seen: state.seen_classes(),
        accuracy: evaluate(state, &test)?,
        cos_train: cosine_analysis(state, &train)?,
        cos_test: cosine_analysis(state, &state.features(&test)?)?,
    })
}

/// Base session plus every incremental session, evaluating after each.
pub fn run_protocol(stream: &SessionStream, cfg: &RunConfig, variant: Variant) -> Result<ProtocolReport> {
    let mut state = run_base_session(stream, cfg, variant)?;
    let mut records = vec![record(&state, stream, 0)?];
    for (i, inc) in stream.increments.iter().enumerate() {
        state = run_incremental_session(&state, inc, cfg)?;
        records.push(record(&state, stream, i + 1)?);
        log::info!(
            "{variant} session {}: {:.2}% over {} classes",
            i + 1,
            records[i + 1].accuracy,
            records[i + 1].classes_seen
        );
    }
    Ok(ProtocolReport::from_records(variant, records))
}

/// All five variants on the same stream and seed, each compared against
/// `cfg.baseline`.
pub fn ablation_suite(stream: &SessionStream, cfg: &RunConfig) -> Result<Vec<ProtocolReport>> {
    let mut reports = Variant::ALL
        .par_iter()
        .map(|&v| run_protocol(stream, cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let base = reports
        .iter()
        .find(|r| r.variant == cfg.baseline)
        .expect("every variant is run")
        .clone();
    for r in &mut reports {
        r.compare_to(&base);
    }
    Ok(reports)
}

/// Plain-text comparison table: one row per report with final and average
/// accuracy and the improvement over the baseline.
pub fn ablation_table(reports: &[ProtocolReport]) -> String {
    let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "variant", "final", "average", "delta");
    for r in reports {
        let delta = r
            .relative_improvement
            .map_or_else(|| "-".to_string(), |d| format!("{d:+.2}"));
        writeln!(
            out,
            "{:<12} {:>8.2} {:>8.2} {:>8}",
            r.variant.name(),
            r.final_accuracy(),
            r.average_accuracy,
            delta
        )
        .expect("writing to a string");
    }
    out
}
