//! Feature sources: collapsed synthetic features, a small trainable network
//! frozen after training, and the random-crop sampler.

mod batch;
mod patches;
mod synthetic;
mod toy;

pub use batch::{clamp_nonneg, FeatureBatch};
pub use patches::{sample_patches, PatchInput, PatchSpec};
pub use synthetic::{sample_around, synth_features, SyntheticSpec};
pub use toy::{
    extract, extract_jacobians, train_toy_extractor, Activation, FeatureExtractor,
    IdentityExtractor, Mlp, ToyExtractor, ToyTrainConfig,
};
