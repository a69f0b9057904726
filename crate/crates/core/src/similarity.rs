//! Token-similarity classifier.
//!
//! Every support token is compared with every query token by cosine
//! similarity. The importance weight of a support token is added to its
//! whole row, the result is divided by the temperature, and each class
//! logit is the LogSumExp over all `K*L*L` entries pairing that class's
//! support tokens with the query's tokens. A softmax over class logits
//! gives the prediction.
//!
//! Storage is `f32`, arithmetic is `f64` throughout.

use crate::error::{Error, Result};
use crate::token_model::{flatten_support, ClassifierConfig, Episode, FlatSupport};

/// Norm below which a token is treated as zero; its cosine with anything is 0.
pub const ZERO_NORM: f64 = 1e-12;

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return 0.0;
    }
    dot / (nu * nv)
}

/// Stabilized `ln(sum(exp(x)))`. `-inf` entries are absent terms; an empty
/// or all `-inf` input yields `-inf`.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with temperature 1. Classes with a `-inf` logit get probability 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits.iter().copied());
    logits.iter().map(|&x| (x - lse).exp()).collect()
}

/// Rows scaled to unit length; rows with norm below [`ZERO_NORM`] become zero.
pub(crate) fn normalize_rows(data: &[f64], dim: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(dim) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Cosine similarity of every row of `a` with every row of `b`, row-major
/// `rows(a) x rows(b)`.
pub(crate) fn cosine_matrix(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let (an, bn) = (normalize_rows(a, dim), normalize_rows(b, dim));
    an.chunks(dim)
        .flat_map(|u| {
            bn.chunks(dim)
                .map(move |w| u.iter().zip(w).map(|(x, y)| x * y).sum::<f64>())
        })
        .collect()
}

/// Support-by-query similarity matrix with row and column metadata.
///
/// Rows follow [`flatten_support`]; column `c` is token `c % L` of query
/// `c / L`. Masked entries hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    row_class: Vec<usize>,
    n_classes: usize,
    cols_per_query: usize,
}

impl SimilarityTensor {
    pub fn from_parts(
        values: Vec<f64>,
        row_class: Vec<usize>,
        n_classes: usize,
        cols_per_query: usize,
    ) -> Result<Self> {
        let rows = row_class.len();
        if rows == 0 || cols_per_query == 0 || !values.len().is_multiple_of(rows) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form a matrix with {rows} rows",
                values.len()
            )));
        }
        let cols = values.len() / rows;
        if !cols.is_multiple_of(cols_per_query) {
            return Err(Error::ShapeMismatch(format!(
                "{cols} columns are not a multiple of {cols_per_query} tokens per query"
            )));
        }
        if let Some(&c) = row_class.iter().find(|&&c| c >= n_classes) {
            return Err(Error::ShapeMismatch(format!(
                "row class {c} >= {n_classes}"
            )));
        }
        Ok(Self {
            values,
            rows,
            cols,
            row_class,
            n_classes,
            cols_per_query,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_queries(&self) -> usize {
        self.cols / self.cols_per_query
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row_class(&self) -> &[usize] {
        &self.row_class
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

/// Builds cosine similarities between flattened support tokens and query
/// tokens (`(Q*L) x D`, row-major, `cols_per_query = L`).
pub fn build_similarity(
    support: &FlatSupport,
    n_classes: usize,
    query_tokens: &[f64],
    cols_per_query: usize,
) -> Result<SimilarityTensor> {
    let dim = support.dim;
    if dim == 0 || !query_tokens.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!(
            "query token buffer of {} values is not a multiple of D = {dim}",
            query_tokens.len()
        )));
    }
    let values = cosine_matrix(&support.tokens, query_tokens, dim);
    SimilarityTensor::from_parts(
        values,
        support.token_class.clone(),
        n_classes,
        cols_per_query,
    )
}

/// Additive per-token importance weights, one per support token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights(Vec<f64>);

impl ImportanceWeights {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig(
                "importance weights must be finite".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Adds `v[j]` to every entry of row `j`. `-inf` entries stay `-inf`.
pub fn apply_reweighting(s: &SimilarityTensor, v: &ImportanceWeights) -> Result<SimilarityTensor> {
    if v.len() != s.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} importance weights for {} support tokens",
            v.len(),
            s.rows
        )));
    }
    let mut out = s.clone();
    for (row, &w) in out.values.chunks_mut(s.cols).zip(v.as_slice()) {
        row.iter_mut().for_each(|x| *x += w);
    }
    Ok(out)
}

/// Per-class LogSumExp of `s / tau` over the columns of one query.
pub fn class_logits(s: &SimilarityTensor, tau: f64, query_index: usize) -> Result<Vec<f64>> {
    if query_index >= s.num_queries() {
        return Err(Error::ShapeMismatch(format!(
            "query index {query_index} out of range ({} queries)",
            s.num_queries()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let cols = query_index * s.cols_per_query..(query_index + 1) * s.cols_per_query;
    let mut max = vec![f64::NEG_INFINITY; s.n_classes];
    for j in 0..s.rows {
        let m = &mut max[s.row_class[j]];
        for &x in &s.row(j)[cols.clone()] {
            *m = m.max(x / tau);
        }
    }
    let mut sum = vec![0.0; s.n_classes];
    for j in 0..s.rows {
        let class = s.row_class[j];
        if max[class] == f64::NEG_INFINITY {
            continue;
        }
        sum[class] += s.row(j)[cols.clone()]
            .iter()
            .map(|&x| (x / tau - max[class]).exp())
            .sum::<f64>();
    }
    Ok(max
        .iter()
        .zip(&sum)
        .map(|(&m, &z)| {
            if m == f64::NEG_INFINITY {
                m
            } else {
                m + z.ln()
            }
        })
        .collect())
}

/// Output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl ClassPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        let predicted = argmax(&probs);
        Self {
            logits,
            probs,
            predicted,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Query tokens of an episode stacked query-major, `(Q*L) x D`.
pub fn stack_queries(episode: &Episode) -> Vec<f64> {
    episode
        .queries()
        .iter()
        .flat_map(|(g, _)| g.as_slice().iter().map(|&x| f64::from(x)))
        .collect()
}

/// Classifies every query of the episode from one shared similarity tensor.
pub fn predict(
    episode: &Episode,
    v: &ImportanceWeights,
    cfg: &ClassifierConfig,
) -> Result<Vec<ClassPrediction>> {
    cfg.validate()?;
    if v.len() != episode.num_support_tokens() {
        return Err(Error::ShapeMismatch(format!(
            "{} importance weights for {} support tokens",
            v.len(),
            episode.num_support_tokens()
        )));
    }
    if episode.num_queries() == 0 {
        return Ok(Vec::new());
    }
    let support = flatten_support(episode);
    let s = build_similarity(
        &support,
        episode.n_way(),
        &stack_queries(episode),
        episode.tokens_per_image(),
    )?;
    let s = apply_reweighting(&s, v)?;
    (0..episode.num_queries())
        .map(|q| class_logits(&s, cfg.tau, q).map(ClassPrediction::from_logits))
        .collect()
}

/// Fraction of queries whose prediction matches the true class.
pub fn accuracy(episode: &Episode, predictions: &[ClassPrediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = episode
        .queries()
        .iter()
        .zip(predictions)
        .filter(|((_, label), p)| p.predicted == *label)
        .count();
    correct as f64 / predictions.len() as f64
}
