use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random crop sampler. In image mode `patch_fraction` is the side fraction
/// of a square crop; in vector mode it is the fraction of coordinates kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub patch_fraction: f64,
    pub patches_per_image: usize,
    pub rng_seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_fraction: 0.5,
            patches_per_image: 10,
            rng_seed: 42,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_fraction > 0.0 && self.patch_fraction <= 1.0) {
            return Err(Error::validation("patches.patch_fraction", "must be in (0, 1]"));
        }
        if self.patches_per_image < 1 {
            return Err(Error::validation("patches.patches_per_image", "must be >= 1"));
        }
        Ok(())
    }
}

/// Inputs to crop: row-major images of a fixed size, or plain vectors.
#[derive(Debug, Clone, Copy)]
pub enum PatchInput<'a> {
    Images {
        pixels: ArrayView2<'a, f64>,
        height: usize,
        width: usize,
    },
    Vectors(ArrayView2<'a, f64>),
}

/// `patches_per_image` crops per input, image-major (all crops of input 0
/// first). Pixels or coordinates outside the crop are zero, so every crop
/// keeps the input's size.
pub fn sample_patches(input: PatchInput<'_>, spec: &PatchSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let per = spec.patches_per_image;
    match input {
        PatchInput::Vectors(x) => {
            let (n, m) = x.dim();
            let keep = ((spec.patch_fraction * m as f64).ceil() as usize).clamp(1, m.max(1));
            let mut out = Array2::zeros((n * per, m));
            for i in 0..n {
                for c in 0..per {
                    let mut row = out.row_mut(i * per + c);
                    for j in sample(&mut rng, m, keep) {
                        row[j] = x[[i, j]];
                    }
                }
            }
            Ok(out)
        }
        PatchInput::Images {
            pixels,
            height,
            width,
        } => {
            if pixels.ncols() != height * width {
                return Err(Error::ShapeMismatch(format!(
                    "{} pixels per row for a {height}x{width} image",
                    pixels.ncols()
                )));
            }
            let ch = ((spec.patch_fraction * height as f64).ceil() as usize).clamp(1, height.max(1));
            let cw = ((spec.patch_fraction * width as f64).ceil() as usize).clamp(1, width.max(1));
            let n = pixels.nrows();
            let mut out = Array2::zeros((n * per, height * width));
            for i in 0..n {
                for c in 0..per {
                    let top = rng.random_range(0..=height - ch);
                    let left = rng.random_range(0..=width - cw);
                    let mut row = out.row_mut(i * per + c);
                    for r in top..top + ch {
                        for col in left..left + cw {
                            row[r * width + col] = pixels[[i, r * width + col]];
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}
