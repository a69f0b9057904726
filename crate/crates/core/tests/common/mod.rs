//! Brute-force reference implementations used across the integration tests.
//! They share no code with the library beyond the data containers.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fewshot_tokens::{Episode, TokenGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn naive_cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// log(sum(exp(x))) over a plain list, shifted by its maximum.
pub fn naive_lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut total = 0.0;
    for x in xs {
        total += (x - m).exp();
    }
    m + total.ln()
}

pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let z = naive_lse(logits);
    logits.iter().map(|x| (x - z).exp()).collect()
}

/// Class logits of one query: for each class, LSE over shots, support
/// patches and query patches of (cos + v) / tau.
pub fn oracle_query_logits(ep: &Episode, v: &[f64], tau: f64, query: &TokenGrid) -> Vec<f64> {
    let (n, k, l) = (ep.n_way(), ep.k_shot(), ep.tokens_per_image());
    let mut logits = Vec::with_capacity(n);
    for class in 0..n {
        let mut terms = Vec::new();
        for shot in 0..k {
            let image = &ep.support()[class * k + shot];
            for ls in 0..l {
                let j = (class * k + shot) * l + ls;
                for lq in 0..l {
                    let s = naive_cosine(image.token(ls), query.token(lq));
                    terms.push((s + v[j]) / tau);
                }
            }
        }
        logits.push(naive_lse(&terms));
    }
    logits
}

/// Whether support token `row` is hidden from pseudo-query token `col`.
pub fn oracle_masked(ep: &Episode, window: usize, row: usize, col: usize) -> bool {
    let l = ep.tokens_per_image();
    if row / l != col / l {
        return false;
    }
    if ep.k_shot() > 1 {
        return true;
    }
    let w = ep.shape().grid_w;
    let (r, c) = (row % l, col % l);
    let dr = (r / w) as i64 - (c / w) as i64;
    let dc = (r % w) as i64 - (c % w) as i64;
    let half = (window / 2) as i64;
    dr.abs() <= half && dc.abs() <= half
}

/// Logits of every support image used as a pseudo-query against the
/// masked, reweighted support set.
pub fn oracle_support_logits(ep: &Episode, v: &[f64], tau: f64, window: usize) -> Vec<Vec<f64>> {
    let (n, k, l) = (ep.n_way(), ep.k_shot(), ep.tokens_per_image());
    let images = n * k;
    let mut out = Vec::with_capacity(images);
    for p in 0..images {
        let pseudo = &ep.support()[p];
        let mut logits = Vec::with_capacity(n);
        for class in 0..n {
            let mut terms = Vec::new();
            for shot in 0..k {
                let image = class * k + shot;
                for ls in 0..l {
                    let row = image * l + ls;
                    for lq in 0..l {
                        let col = p * l + lq;
                        if oracle_masked(ep, window, row, col) {
                            continue;
                        }
                        let s = naive_cosine(ep.support()[image].token(ls), pseudo.token(lq));
                        terms.push((s + v[row]) / tau);
                    }
                }
            }
            logits.push(naive_lse(&terms));
        }
        out.push(logits);
    }
    out
}

/// Summed cross-entropy of the pseudo-queries.
pub fn oracle_support_loss(ep: &Episode, v: &[f64], tau: f64, window: usize) -> f64 {
    let logits = oracle_support_logits(ep, v, tau, window);
    logits
        .iter()
        .enumerate()
        .map(|(p, row)| naive_lse(row) - row[p / ep.k_shot()])
        .sum()
}

pub fn oracle_gradient(ep: &Episode, v: &[f64], tau: f64, window: usize, h: f64) -> Vec<f64> {
    let mut probe = v.to_vec();
    (0..v.len())
        .map(|j| {
            probe[j] = v[j] + h;
            let up = oracle_support_loss(ep, &probe, tau, window);
            probe[j] = v[j] - h;
            let down = oracle_support_loss(ep, &probe, tau, window);
            probe[j] = v[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_grid<R: Rng>(
    rng: &mut R,
    gh: usize,
    gw: usize,
    dim: usize,
    id: &str,
) -> Arc<TokenGrid> {
    let tokens = (0..gh * gw * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    Arc::new(TokenGrid::new(tokens, dim, gh, gw, id).unwrap())
}

/// Random episode built directly from grids, support listed shot-major to
/// exercise the class regrouping.
pub fn random_episode<R: Rng>(
    rng: &mut R,
    n: usize,
    k: usize,
    q: usize,
    gh: usize,
    gw: usize,
    dim: usize,
) -> Episode {
    let mut support = Vec::new();
    for shot in 0..k {
        for class in 0..n {
            support.push((
                random_grid(rng, gh, gw, dim, &format!("s{class}.{shot}")),
                class,
            ));
        }
    }
    let mut queries = Vec::new();
    for class in 0..n {
        for i in 0..q {
            queries.push((
                random_grid(rng, gh, gw, dim, &format!("q{class}.{i}")),
                class,
            ));
        }
    }
    Episode::new(n, k, support, queries).unwrap()
}

pub fn random_v<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

/// Small episode shapes with `N * K * L <= 32`.
pub fn small_shape<R: Rng>(rng: &mut R) -> (usize, usize, usize, usize) {
    loop {
        let n = rng.random_range(2..=4);
        let k = rng.random_range(1..=3);
        let gh = rng.random_range(1..=3);
        let gw = rng.random_range(1..=3);
        if n * k * gh * gw <= 32 && (k > 1 || gh * gw > 1) {
            return (n, k, gh, gw);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Number of cells within `half` of `x` on a line of `n` cells.
pub fn clipped(x: usize, n: usize, half: usize) -> usize {
    let lo = x.saturating_sub(half);
    let hi = (x + half).min(n - 1);
    hi - lo + 1
}
