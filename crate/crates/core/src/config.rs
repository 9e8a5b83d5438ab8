//! Run configuration: JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{CeConfig, FinetuneConfig};
use crate::error::{Error, Result};
use crate::extractor::{PatchSpec, ToyTrainConfig};
use crate::runner::Variant;
use crate::solvers::SolverOptions;

/// Where session data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Noisy copies of simplex vertices, fed through an identity extractor.
    #[default]
    Synthetic,
    /// Pre-extracted features read from MFB1 files.
    FeaturesFromFile,
    /// Generated images fed through a small trained network.
    ToyImages,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub base_classes: usize,
    pub sessions: usize,
    pub ways: usize,
    pub shots: usize,
    pub dim: usize,
    /// Noise scale around each class center.
    pub sigma: f64,
    pub base_train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            base_classes: 10,
            sessions: 4,
            ways: 2,
            shots: 5,
            dim: 24,
            sigma: 0.15,
            base_train_per_class: 20,
            test_per_class: 20,
        }
    }
}

impl StreamConfig {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.sessions * self.ways
    }
}

/// Train and test feature files for `features-from-file` mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureFiles {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Image generator and extractor training for `toy-images` mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Images are `side × side`.
    pub side: usize,
    /// Pixel noise around each class prototype.
    pub noise: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            side: 8,
            noise: 0.3,
            hidden: 32,
            epochs: 500,
            lr: 0.1,
        }
    }
}

impl ToyConfig {
    pub fn train_config(&self, seed: u64) -> ToyTrainConfig {
        ToyTrainConfig {
            hidden: self.hidden,
            epochs: self.epochs,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Concept count; `None` means `min(2·base_classes, dim/2)`.
    pub rank: Option<usize>,
    pub patch_fraction: f64,
    pub patches_per_image: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            rank: None,
            patch_fraction: 0.25,
            patches_per_image: 4,
        }
    }
}

impl BankConfig {
    pub fn patch_spec(&self, seed: u64) -> PatchSpec {
        PatchSpec {
            patch_fraction: self.patch_fraction,
            patches_per_image: self.patches_per_image,
            rng_seed: seed,
        }
    }
}

/// Everything a run depends on. Every random choice is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub variant: Variant,
    /// Variant the relative improvement is measured against.
    pub baseline: Variant,
    /// Hadamard factor count of the classifier.
    pub layers: usize,
    pub stream: StreamConfig,
    pub features: FeatureFiles,
    pub toy: ToyConfig,
    pub bank: BankConfig,
    pub solver: SolverOptions,
    pub finetune: FinetuneConfig,
    /// Cross-entropy training of the base rows (LearnableCE).
    pub ce_base: CeConfig,
    /// Cross-entropy training in incremental sessions (LearnableCE, NcCE).
    pub ce_session: CeConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Synthetic,
            seed: 42,
            variant: Variant::Masil,
            baseline: Variant::LearnableCe,
            layers: 1,
            stream: StreamConfig::default(),
            features: FeatureFiles::default(),
            toy: ToyConfig::default(),
            bank: BankConfig::default(),
            solver: SolverOptions::default(),
            finetune: FinetuneConfig::default(),
            ce_base: CeConfig::default(),
            ce_session: CeConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
                RunConfig::from_json_str(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Bank rank after applying the default rule.
    pub fn bank_rank(&self) -> usize {
        self.bank
            .rank
            .unwrap_or_else(|| (2 * self.stream.base_classes).min(self.stream.dim / 2))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stream;
        if s.base_classes < 2 {
            return Err(Error::validation("stream.base_classes", "must be >= 2"));
        }
        if s.sessions > 0 && s.ways < 1 {
            return Err(Error::validation("stream.ways", "must be >= 1"));
        }
        if s.shots < 1 {
            return Err(Error::validation("stream.shots", "must be >= 1"));
        }
        if s.dim < 1 {
            return Err(Error::validation("stream.dim", "must be >= 1"));
        }
        if self.mode != Mode::FeaturesFromFile && s.dim + 1 < s.total_classes() {
            return Err(Error::validation(
                "stream.dim",
                format!("must be >= {} to hold a simplex over all classes", s.total_classes() - 1),
            ));
        }
        if !(s.sigma >= 0.0) || !s.sigma.is_finite() {
            return Err(Error::validation("stream.sigma", "must be a finite value >= 0"));
        }
        if s.base_train_per_class < 1 {
            return Err(Error::validation("stream.base_train_per_class", "must be >= 1"));
        }
        if s.test_per_class < 1 {
            return Err(Error::validation("stream.test_per_class", "must be >= 1"));
        }
        if self.layers < 1 {
            return Err(Error::validation("layers", "must be >= 1"));
        }
        if self.mode == Mode::FeaturesFromFile {
            if self.features.train.is_none() {
                return Err(Error::validation("features.train", "required in features-from-file mode"));
            }
            if self.features.test.is_none() {
                return Err(Error::validation("features.test", "required in features-from-file mode"));
            }
        }
        if self.toy.side < 1 {
            return Err(Error::validation("toy.side", "must be >= 1"));
        }
        if !(self.toy.noise >= 0.0) || !self.toy.noise.is_finite() {
            return Err(Error::validation("toy.noise", "must be a finite value >= 0"));
        }
        if self.toy.hidden < 1 {
            return Err(Error::validation("toy.hidden", "must be >= 1"));
        }
        if !(self.toy.lr >= 0.0) || !self.toy.lr.is_finite() {
            return Err(Error::validation("toy.lr", "must be a finite value >= 0"));
        }
        if let Some(r) = self.bank.rank {
            if r < 1 {
                return Err(Error::validation("bank.rank", "must be >= 1"));
            }
            if self.mode != Mode::FeaturesFromFile && r > s.dim {
                return Err(Error::validation("bank.rank", format!("must be <= stream.dim ({})", s.dim)));
            }
        }
        if self.mode != Mode::FeaturesFromFile && self.bank_rank() < 1 {
            return Err(Error::validation("bank.rank", "default rank is 0; set it explicitly"));
        }
        let patches = self.bank.patch_spec(0);
        patches.validate().map_err(|e| match e {
            Error::Validation { key, reason } => {
                Error::validation(key.replacen("patches.", "bank.", 1), reason)
            }
            other => other,
        })?;
        self.solver.validate()?;
        self.finetune.validate()?;
        self.ce_base.validate("ce_base")?;
        self.ce_session.validate("ce_session")?;
        Ok(())
    }
}
