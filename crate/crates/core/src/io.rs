//! File formats: features (MFB1), concept banks (MCB1), classifiers (MSC1),
//! JSON reports and CSV session tables, and the saved pipeline state.
//!
//! All binary numbers are little-endian; matrices are row-major `f64`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassMemory, SimplexClassifier};
use crate::concepts::{BankStats, ConceptBank};
use crate::error::{Error, Result};
use crate::extractor::FeatureBatch;
use crate::runner::{Extractor, PipelineState, ProtocolReport, Variant};

const FEATURES_MAGIC: [u8; 4] = *b"MFB1";
const BANK_MAGIC: [u8; 4] = *b"MCB1";
const CLASSIFIER_MAGIC: [u8; 4] = *b"MSC1";
const FEATURES_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile(what))?;
        let out = self.buf.get(self.pos..end).ok_or(Error::TruncatedFile(what))?;
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<Array2<f64>> {
        let n = rows.checked_mul(cols).ok_or(Error::TruncatedFile(what))?;
        let bytes = self.take(n.checked_mul(8).ok_or(Error::TruncatedFile(what))?, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse(format!(
                "{} unexpected trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_features(batch: &FeatureBatch) -> Vec<u8> {
    let (n, d) = batch.features().dim();
    let mut out = Vec::with_capacity(28 + 8 * n * d + 4 * n);
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    put_matrix(&mut out, batch.features());
    out.extend_from_slice(&(batch.labels().len() as u64).to_le_bytes());
    for &y in batch.labels() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureBatch> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURES_MAGIC)?;
    let version = r.u32("version")?;
    if version != FEATURES_VERSION {
        return Err(Error::VersionMismatch {
            expected: FEATURES_VERSION,
            found: version,
        });
    }
    let n = r.u64("row count")? as usize;
    let d = r.u64("column count")? as usize;
    let f = r.matrix(n, d, "feature values")?;
    let count = r.u64("label count")? as usize;
    if count != n {
        return Err(Error::Parse(format!("{count} labels for {n} rows")));
    }
    let labels = (0..count).map(|_| r.u32("labels")).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FeatureBatch::new(f, labels)
}

pub fn save_features(path: &Path, batch: &FeatureBatch) -> Result<()> {
    Ok(fs::write(path, encode_features(batch))?)
}

pub fn load_features(path: &Path) -> Result<FeatureBatch> {
    decode_features(&fs::read(path)?)
}

pub fn encode_bank(bank: &ConceptBank) -> Vec<u8> {
    let (v, d) = bank.q().dim();
    let stats = serde_json::to_vec(bank.stats()).expect("stats serialize");
    let mut out = Vec::with_capacity(16 + 8 * v * d + stats.len());
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    put_matrix(&mut out, bank.q());
    out.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    out.extend_from_slice(&stats);
    out
}

pub fn decode_bank(bytes: &[u8]) -> Result<ConceptBank> {
    let mut r = Reader::new(bytes);
    r.magic(BANK_MAGIC)?;
    let v = r.u32("rank")? as usize;
    let d = r.u32("dimension")? as usize;
    let q = r.matrix(v, d, "bank rows")?;
    let len = r.u32("stats length")? as usize;
    let blob = r.take(len, "stats")?;
    r.finish()?;
    let stats: BankStats = serde_json::from_slice(blob).map_err(|e| Error::Parse(format!("bank stats: {e}")))?;
    ConceptBank::from_parts(q, stats)
}

pub fn save_bank(path: &Path, bank: &ConceptBank) -> Result<()> {
    Ok(fs::write(path, encode_bank(bank))?)
}

pub fn load_bank(path: &Path) -> Result<ConceptBank> {
    decode_bank(&fs::read(path)?)
}

/// Rows, anchors, the layer factors when there is more than one, and
/// finally the pre-normalization norm of each anchor.
pub fn encode_classifier(c: &SimplexClassifier) -> Vec<u8> {
    let (k, d) = c.effective_w().dim();
    let mut out = Vec::with_capacity(16 + 8 * k * d * (2 + c.num_layers()) + 8 * k);
    out.extend_from_slice(&CLASSIFIER_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(c.num_layers() as u32).to_le_bytes());
    put_matrix(&mut out, c.effective_w());
    put_matrix(&mut out, c.induced_targets());
    if let Some(layers) = c.layers() {
        for l in layers {
            put_matrix(&mut out, l);
        }
    }
    for s in c.induced_scale() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_classifier(bytes: &[u8]) -> Result<SimplexClassifier> {
    let mut r = Reader::new(bytes);
    r.magic(CLASSIFIER_MAGIC)?;
    let k = r.u32("class count")? as usize;
    let d = r.u32("dimension")? as usize;
    let l = r.u32("layer count")? as usize;
    let w = r.matrix(k, d, "classifier rows")?;
    let t = r.matrix(k, d, "anchor rows")?;
    let layers = if l > 1 {
        Some((0..l).map(|_| r.matrix(k, d, "layer factors")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let scale = r.matrix(1, k, "anchor scales")?.into_raw_vec_and_offset().0;
    r.finish()?;
    SimplexClassifier::from_parts(w, t, layers, l, scale)
}

pub fn save_classifier(path: &Path, c: &SimplexClassifier) -> Result<()> {
    Ok(fs::write(path, encode_classifier(c))?)
}

pub fn load_classifier(path: &Path) -> Result<SimplexClassifier> {
    decode_classifier(&fs::read(path)?)
}

pub fn report_json(report: &ProtocolReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn save_report(dir: &Path, report: &ProtocolReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report_json(report))?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ProtocolReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Scalar progress of a saved pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    variant: Variant,
    base_classes: usize,
    session: usize,
    reserved: Option<Array2<f64>>,
}

const STATE_FILE: &str = "state.json";
const CLASSIFIER_FILE: &str = "classifier.msc";
const BANK_FILE: &str = "bank.mcb";
const MEMORY_FILE: &str = "memory.json";
const EXTRACTOR_FILE: &str = "extractor.json";

/// Writes the pipeline to `dir` as one file per component.
pub fn save_state(dir: &Path, state: &PipelineState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = StateMeta {
        variant: state.variant,
        base_classes: state.base_classes,
        session: state.session,
        reserved: state.reserved.clone(),
    };
    fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&meta).expect("serializes"))?;
    save_classifier(&dir.join(CLASSIFIER_FILE), &state.classifier)?;
    fs::write(
        dir.join(MEMORY_FILE),
        serde_json::to_string_pretty(&state.memory).expect("serializes"),
    )?;
    fs::write(
        dir.join(EXTRACTOR_FILE),
        serde_json::to_string(&state.extractor).expect("serializes"),
    )?;
    let bank_path = dir.join(BANK_FILE);
    match &state.bank {
        Some(b) => save_bank(&bank_path, b)?,
        None if bank_path.exists() => fs::remove_file(bank_path)?,
        None => {}
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_state(dir: &Path) -> Result<PipelineState> {
    let meta: StateMeta = read_json(&dir.join(STATE_FILE))?;
    let memory: ClassMemory = read_json(&dir.join(MEMORY_FILE))?;
    let extractor: Extractor = read_json(&dir.join(EXTRACTOR_FILE))?;
    let bank_path = dir.join(BANK_FILE);
    let bank = if bank_path.exists() {
        Some(load_bank(&bank_path)?)
    } else {
        None
    };
    Ok(PipelineState {
        variant: meta.variant,
        extractor,
        classifier: load_classifier(&dir.join(CLASSIFIER_FILE))?,
        memory,
        bank,
        reserved: meta.reserved,
        base_classes: meta.base_classes,
        session: meta.session,
    })
}
