//! Token grids, episodes and classifier configuration.
//!
//! Support tokens are always addressed in class-major order: row
//! `j = (class * k_shot + shot) * L + patch`. Every module that indexes
//! support tokens relies on this layout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch embeddings of one image: `L` tokens of dimension `D` laid out on a
/// `grid_h x grid_w` patch grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    tokens: Vec<f32>,
    len: usize,
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    image_id: String,
}

impl TokenGrid {
    pub fn new(
        tokens: Vec<f32>,
        dim: usize,
        grid_h: usize,
        grid_w: usize,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        let len = grid_h * grid_w;
        if len == 0 || dim == 0 {
            return Err(Error::InvalidGrid(format!(
                "empty grid (grid {grid_h}x{grid_w}, dim {dim})"
            )));
        }
        if tokens.len() != len * dim {
            return Err(Error::InvalidGrid(format!(
                "expected {len}x{dim} = {} values, got {}",
                len * dim,
                tokens.len()
            )));
        }
        if let Some(pos) = tokens.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "non-finite value at token {}, dim {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            tokens,
            len,
            dim,
            grid_h,
            grid_w,
            image_id: image_id.into(),
        })
    }

    /// Number of tokens `L`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn token(&self, l: usize) -> &[f32] {
        &self.tokens[l * self.dim..(l + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.tokens
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            len: self.len,
            dim: self.dim,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

/// Shape shared by every grid of an episode or dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub len: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// One N-way K-shot task. Support grids are stored class-major.
#[derive(Debug, Clone)]
pub struct Episode {
    n_way: usize,
    k_shot: usize,
    shape: GridShape,
    support: Vec<Arc<TokenGrid>>,
    queries: Vec<(Arc<TokenGrid>, usize)>,
}

impl Episode {
    /// Builds an episode from `(grid, class)` pairs. Support pairs may come
    /// in any order; they are regrouped class-major, keeping the relative
    /// order of shots within each class.
    pub fn new(
        n_way: usize,
        k_shot: usize,
        support: Vec<(Arc<TokenGrid>, usize)>,
        queries: Vec<(Arc<TokenGrid>, usize)>,
    ) -> Result<Self> {
        if n_way < 2 {
            return Err(Error::InvalidEpisode(format!(
                "n_way must be >= 2, got {n_way}"
            )));
        }
        if k_shot < 1 {
            return Err(Error::InvalidEpisode("k_shot must be >= 1".into()));
        }
        let shape = support
            .first()
            .map(|(g, _)| g.shape())
            .ok_or_else(|| Error::InvalidEpisode("empty support set".into()))?;

        let mut per_class: Vec<Vec<Arc<TokenGrid>>> = vec![Vec::new(); n_way];
        for (grid, class) in support {
            if class >= n_way {
                return Err(Error::InvalidEpisode(format!(
                    "support class {class} out of range for {n_way}-way episode"
                )));
            }
            check_shape(&grid, shape)?;
            per_class[class].push(grid);
        }
        for (class, grids) in per_class.iter().enumerate() {
            if grids.len() != k_shot {
                return Err(Error::InvalidEpisode(format!(
                    "class {class} has {} support shots, expected {k_shot}",
                    grids.len()
                )));
            }
        }
        for (grid, class) in &queries {
            if *class >= n_way {
                return Err(Error::InvalidEpisode(format!(
                    "query class {class} out of range for {n_way}-way episode"
                )));
            }
            check_shape(grid, shape)?;
        }

        Ok(Self {
            n_way,
            k_shot,
            shape,
            support: per_class.into_iter().flatten().collect(),
            queries,
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Tokens per image `L`.
    pub fn tokens_per_image(&self) -> usize {
        self.shape.len
    }

    pub fn num_support_images(&self) -> usize {
        self.support.len()
    }

    /// Total support tokens `N*K*L`.
    pub fn num_support_tokens(&self) -> usize {
        self.support.len() * self.shape.len
    }

    /// Support grids in class-major order; image `i` has class `i / K`.
    pub fn support(&self) -> &[Arc<TokenGrid>] {
        &self.support
    }

    pub fn support_class(&self, image: usize) -> usize {
        image / self.k_shot
    }

    pub fn queries(&self) -> &[(Arc<TokenGrid>, usize)] {
        &self.queries
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }
}

fn check_shape(grid: &TokenGrid, shape: GridShape) -> Result<()> {
    if grid.shape() != shape {
        return Err(Error::InvalidEpisode(format!(
            "grid `{}` has shape {:?}, episode uses {:?}",
            grid.image_id(),
            grid.shape(),
            shape
        )));
    }
    Ok(())
}

/// Similarity measure between tokens. Only cosine is supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
}

/// Hyperparameters of the classifier and its inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Temperature dividing every similarity inside the LogSumExp.
    pub tau: f64,
    /// Inner-loop SGD learning rate.
    pub lr: f64,
    /// Number of inner-loop SGD steps.
    pub steps: usize,
    /// Side of the local mask window used for 1-shot episodes (odd).
    pub mask_window: usize,
    pub similarity: Similarity,
}

impl ClassifierConfig {
    pub const DEFAULT_LR: f64 = 0.1;
    pub const DEFAULT_STEPS: usize = 15;
    pub const DEFAULT_MASK_WINDOW: usize = 5;

    /// Default configuration for tokens of dimension `dim`, with `tau = 1/sqrt(dim)`.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            tau: 1.0 / (dim.max(1) as f64).sqrt(),
            lr: Self::DEFAULT_LR,
            steps: Self::DEFAULT_STEPS,
            mask_window: Self::DEFAULT_MASK_WINDOW,
            similarity: Similarity::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.mask_window == 0 || self.mask_window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "mask window must be odd and >= 1, got {}",
                self.mask_window
            )));
        }
        Ok(())
    }
}

/// Row layout of the flattened support set.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSupport {
    /// `(N*K*L) x D` row-major token matrix.
    pub tokens: Vec<f64>,
    pub dim: usize,
    pub token_class: Vec<usize>,
    pub token_image: Vec<usize>,
}

impl FlatSupport {
    pub fn rows(&self) -> usize {
        self.token_class.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.tokens[j * self.dim..(j + 1) * self.dim]
    }
}

/// Stacks all support tokens class-major, then shot, then patch.
pub fn flatten_support(episode: &Episode) -> FlatSupport {
    let l = episode.tokens_per_image();
    let dim = episode.shape().dim;
    let mut tokens = Vec::with_capacity(episode.num_support_tokens() * dim);
    let mut token_class = Vec::with_capacity(episode.num_support_tokens());
    let mut token_image = Vec::with_capacity(episode.num_support_tokens());
    for (image, grid) in episode.support().iter().enumerate() {
        tokens.extend(grid.as_slice().iter().map(|&x| f64::from(x)));
        token_class.extend(std::iter::repeat_n(episode.support_class(image), l));
        token_image.extend(std::iter::repeat_n(image, l));
    }
    FlatSupport {
        tokens,
        dim,
        token_class,
        token_image,
    }
}

/// Row index of token `patch` of shot `shot` of class `class`.
pub fn support_row(class: usize, shot: usize, patch: usize, k_shot: usize, len: usize) -> usize {
    (class * k_shot + shot) * len + patch
}

/// Inverse of [`support_row`]: `(class, shot, patch)`.
pub fn decode_support_row(row: usize, k_shot: usize, len: usize) -> (usize, usize, usize) {
    let image = row / len;
    (image / k_shot, image % k_shot, row % len)
}
