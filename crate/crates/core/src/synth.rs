//! Seeded synthetic token data for tests, benchmarks and the gradient check.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eval::TokenDataset;
use crate::token_model::{Episode, TokenGrid};

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn to_grid(
    tokens: Vec<f64>,
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    id: String,
) -> Arc<TokenGrid> {
    let tokens = tokens.into_iter().map(|x| x as f32).collect();
    Arc::new(TokenGrid::new(tokens, dim, grid_h, grid_w, id).expect("synthetic grid is valid"))
}

/// Episode with i.i.d. standard normal tokens and `n_query` queries per class.
pub fn random_episode<R: Rng + ?Sized>(
    rng: &mut R,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
) -> Episode {
    let len = grid_h * grid_w;
    let mut grid = |id: String| to_grid(gaussian(rng, len * dim), dim, grid_h, grid_w, id);
    let support = (0..n_way)
        .flat_map(|c| (0..k_shot).map(move |s| (c, s)))
        .map(|(c, s)| (grid(format!("s{c}-{s}")), c))
        .collect::<Vec<_>>();
    let queries = (0..n_way)
        .flat_map(|c| (0..n_query).map(move |q| (c, q)))
        .map(|(c, q)| (grid(format!("q{c}-{q}")), c))
        .collect();
    Episode::new(n_way, k_shot, support, queries).expect("synthetic episode is valid")
}

/// Dataset whose classes share one token distribution (chance-level accuracy).
pub fn random_dataset(
    classes: usize,
    per_class: usize,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    seed: u64,
) -> TokenDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = grid_h * grid_w;
    let map = (0..classes)
        .map(|c| {
            let grids = (0..per_class)
                .map(|i| {
                    to_grid(
                        gaussian(&mut rng, len * dim),
                        dim,
                        grid_h,
                        grid_w,
                        format!("c{c}/{i}"),
                    )
                })
                .collect();
            (format!("class{c:03}"), grids)
        })
        .collect();
    TokenDataset::new(map).expect("synthetic dataset is valid")
}

/// Dataset where every token of class `c` is the basis vector `e_c` plus
/// Gaussian noise of standard deviation `noise`. Requires `dim >= classes`.
pub fn orthogonal_dataset(
    classes: usize,
    per_class: usize,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> TokenDataset {
    assert!(dim >= classes, "orthogonal classes need dim >= classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = grid_h * grid_w;
    let map = (0..classes)
        .map(|c| {
            let grids = (0..per_class)
                .map(|i| {
                    let mut t = gaussian(&mut rng, len * dim);
                    for (k, x) in t.iter_mut().enumerate() {
                        *x = *x * noise + if k % dim == c { 1.0 } else { 0.0 };
                    }
                    to_grid(t, dim, grid_h, grid_w, format!("c{c}/{i}"))
                })
                .collect();
            (format!("class{c:03}"), grids)
        })
        .collect();
    TokenDataset::new(map).expect("synthetic dataset is valid")
}

/// Layout of the distractor benchmark: class-specific tokens occupy a
/// central block of the grid, all other cells carry tokens from a shared
/// pool of distractor clusters that appear in every class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistractorSpec {
    pub classes: usize,
    pub per_class: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Side of the central square holding class tokens.
    pub core: usize,
    /// Number of shared distractor clusters.
    pub clusters: usize,
    /// Spread of class tokens around their class centre.
    pub class_noise: f64,
    /// Spread of distractor tokens around their cluster centre.
    pub distractor_noise: f64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            classes: 12,
            per_class: 24,
            grid_h: 4,
            grid_w: 4,
            dim: 32,
            core: 2,
            clusters: 6,
            class_noise: 0.25,
            distractor_noise: 0.25,
        }
    }
}

impl DistractorSpec {
    /// Whether grid cell `l` (row-major) holds a class token.
    pub fn is_core(&self, l: usize) -> bool {
        let (r, c) = (l / self.grid_w, l % self.grid_w);
        let top = (self.grid_h - self.core) / 2;
        let left = (self.grid_w - self.core) / 2;
        (top..top + self.core).contains(&r) && (left..left + self.core).contains(&c)
    }

    /// Each image picks one distractor cluster for all of its non-core cells.
    pub fn generate(&self, seed: u64) -> TokenDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.dim;
        let centres: Vec<Vec<f64>> = (0..self.classes).map(|_| unit(&mut rng, dim)).collect();
        let pool: Vec<Vec<f64>> = (0..self.clusters).map(|_| unit(&mut rng, dim)).collect();
        let len = self.grid_h * self.grid_w;
        let map = (0..self.classes)
            .map(|c| {
                let grids = (0..self.per_class)
                    .map(|i| {
                        let cluster = rng.random_range(0..self.clusters);
                        let mut tokens = Vec::with_capacity(len * dim);
                        for l in 0..len {
                            let (centre, noise) = if self.is_core(l) {
                                (&centres[c], self.class_noise)
                            } else {
                                (&pool[cluster], self.distractor_noise)
                            };
                            let scale = noise / (dim as f64).sqrt();
                            let n = gaussian(&mut rng, dim);
                            tokens.extend(centre.iter().zip(n).map(|(m, e)| m + scale * e));
                        }
                        to_grid(tokens, dim, self.grid_h, self.grid_w, format!("c{c}/{i}"))
                    })
                    .collect();
                (format!("class{c:03}"), grids)
            })
            .collect::<BTreeMap<_, _>>();
        TokenDataset::new(map).expect("synthetic dataset is valid")
    }
}

/// Grid shape `(h, w)` used for a token count in the randomized checks.
pub fn square_grid(len: usize) -> (usize, usize) {
    let side = (len as f64).sqrt().round() as usize;
    if side * side == len {
        (side, side)
    } else {
        (1, len)
    }
}
