//! Grayscale rendering of importance weights, one image per support image.
//!
//! Brightness is min-max normalized over the whole episode so support images
//! can be compared with each other.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnm;
use crate::similarity::ImportanceWeights;
use crate::token_model::Episode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapImage {
    pub class: usize,
    pub shot: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major gray levels.
    pub pixels: Vec<u8>,
}

impl HeatmapImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        pnm::encode_pgm(self.width, self.height, &self.pixels)
    }

    pub fn file_name(&self, episode: &str) -> String {
        format!("{episode}_{}_{}.pgm", self.class, self.shot)
    }
}

/// Gray level of every weight; constant weights map to 128.
pub fn normalize(v: &[f64]) -> Vec<u8> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min || max.is_nan() {
        return vec![128; v.len()];
    }
    v.iter()
        .map(|x| (255.0 * (x - min) / (max - min)).round() as u8)
        .collect()
}

/// Renders one heatmap per support image, each cell upsampled to
/// `scale x scale` pixels.
pub fn render_importance(
    v: &ImportanceWeights,
    episode: &Episode,
    scale: usize,
) -> Result<Vec<HeatmapImage>> {
    if v.len() != episode.num_support_tokens() {
        return Err(Error::ShapeMismatch(format!(
            "{} importance weights for {} support tokens",
            v.len(),
            episode.num_support_tokens()
        )));
    }
    if scale == 0 {
        return Err(Error::InvalidConfig("heatmap scale must be >= 1".into()));
    }
    let shape = episode.shape();
    let levels = normalize(v.as_slice());
    let (width, height) = (shape.grid_w * scale, shape.grid_h * scale);
    Ok(levels
        .chunks(shape.len)
        .enumerate()
        .map(|(image, cells)| {
            let pixels = (0..height)
                .flat_map(|y| (0..width).map(move |x| (y / scale) * shape.grid_w + x / scale))
                .map(|cell| cells[cell])
                .collect();
            HeatmapImage {
                class: image / episode.k_shot(),
                shot: image % episode.k_shot(),
                width,
                height,
                pixels,
            }
        })
        .collect())
}

/// Writes heatmaps as `{episode}_{class}_{shot}.pgm` into `dir`.
pub fn write_heatmaps(dir: &Path, episode: &str, images: &[HeatmapImage]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    images
        .iter()
        .map(|img| {
            let path = dir.join(img.file_name(episode));
            pnm::write_pgm(&path, img.width, img.height, &img.pixels)?;
            Ok(path)
        })
        .collect()
}
