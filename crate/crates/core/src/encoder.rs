//! Deterministic toy patch encoder.
//!
//! Stands in for a pretrained Transformer backbone so the classifier can be
//! exercised end to end: each image is cut into `P x P` patches and every
//! flattened patch is multiplied by a fixed random projection. There is no
//! nonlinearity, no attention and no positional information.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm;
use crate::token_model::TokenGrid;

/// Image with pixel values in `[0, 1]`, row-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 || pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Reads a binary PGM/PPM file, scaling bytes by `1/255`.
    pub fn from_pnm_file(path: &Path) -> Result<Self> {
        let img = pnm::read(path)?;
        let pixels = img.data.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(img.height, img.width, img.channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| p * factor).collect(),
            ..self.clone()
        }
    }
}

/// Splits an image into `(H/P)*(W/P)` flattened patches in row-major grid
/// order. Each patch lists its pixels row-major with channels innermost.
pub fn extract_patches(image: &RawImage, patch: usize) -> Result<Vec<Vec<f64>>> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(Error::NotDivisible {
            height: image.height,
            width: image.width,
            patch,
        });
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let mut patches = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        for gc in 0..gw {
            let mut flat = Vec::with_capacity(patch * patch * image.channels);
            for r in 0..patch {
                for c in 0..patch {
                    for ch in 0..image.channels {
                        flat.push(image.pixel(gr * patch + r, gc * patch + c, ch));
                    }
                }
            }
            patches.push(flat);
        }
    }
    Ok(patches)
}

/// Fixed linear map from flattened patches to `D`-dimensional tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProjector {
    patch_size: usize,
    channels: usize,
    out_dim: usize,
    seed: u64,
    /// `(P*P*C) x D`, row-major.
    projection: Vec<f64>,
}

impl PatchProjector {
    /// Generates the projection from `seed`.
    ///
    /// Entries are drawn i.i.d. uniform in `[-a, a]` with `a = 1/sqrt(P*P*C)`.
    /// The generator is ChaCha8 seeded through `seed_from_u64`; each entry
    /// consumes one `u64` `x`, mapped to `u = (x >> 11) * 2^-53` in `[0, 1)`
    /// and then to `a * (2u - 1)`. Entries are generated row-major. This
    /// procedure is fixed so that a seed yields the same matrix everywhere.
    pub fn from_seed(
        patch_size: usize,
        channels: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if patch_size == 0 || out_dim == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidConfig(format!(
                "invalid projector: patch {patch_size}, channels {channels}, dim {out_dim}"
            )));
        }
        let in_dim = patch_size * patch_size * channels;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..in_dim * out_dim)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                bound * (2.0 * u - 1.0)
            })
            .collect();
        Ok(Self {
            patch_size,
            channels,
            out_dim,
            seed,
            projection,
        })
    }

    /// Projector with an explicit matrix, mostly for tests.
    pub fn from_matrix(
        patch_size: usize,
        channels: usize,
        out_dim: usize,
        projection: Vec<f64>,
    ) -> Result<Self> {
        if projection.len() != patch_size * patch_size * channels * out_dim {
            return Err(Error::ShapeMismatch(format!(
                "projection has {} entries, expected {}",
                projection.len(),
                patch_size * patch_size * channels * out_dim
            )));
        }
        if projection.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig(
                "projection has non-finite entries".into(),
            ));
        }
        Ok(Self {
            patch_size,
            channels,
            out_dim,
            seed: 0,
            projection,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    fn project<'a>(&'a self, patch: &'a [f64]) -> impl Iterator<Item = f32> + 'a {
        let d = self.out_dim;
        (0..d).map(move |k| {
            patch
                .iter()
                .enumerate()
                .map(|(i, x)| x * self.projection[i * d + k])
                .sum::<f64>() as f32
        })
    }
}

/// Encodes an image into a token grid of shape `(H/P) x (W/P)`.
pub fn encode(
    image: &RawImage,
    proj: &PatchProjector,
    image_id: impl Into<String>,
) -> Result<TokenGrid> {
    if image.channels != proj.channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, projector expects {}",
            image.channels, proj.channels
        )));
    }
    let patches = extract_patches(image, proj.patch_size)?;
    let tokens: Vec<f32> = patches.iter().flat_map(|p| proj.project(p)).collect();
    TokenGrid::new(
        tokens,
        proj.out_dim,
        image.height / proj.patch_size,
        image.width / proj.patch_size,
        image_id,
    )
}
