//! Inference-time learning of token importance weights.
//!
//! The support set is classified against itself: every support image acts
//! once as an unlabeled pseudo-query and is classified with the same
//! LogSumExp rule used for real queries, against the labeled support
//! tokens. Same-image token pairs are masked so tokens cannot simply match
//! themselves: whole `L x L` diagonal blocks when `K > 1`, and an `m x m`
//! spatial window around each pseudo-query token when `K = 1`. The weights
//! `v` (one per support token, zero-initialized) are then fitted by plain
//! gradient descent on the summed cross-entropy of all pseudo-queries.
//!
//! # Gradient
//!
//! Write `s[j, c]` for the masked support-vs-support similarity between
//! support token `j` (row) and pseudo-query token `c` (column), `n(j)` for
//! the class of row `j`, `C(p)` for the `L` columns of pseudo-query `p`,
//! `y(p)` for its label and `t` for the temperature. The class logits are
//!
//! ```text
//! A[p, n] = ln  sum_{j : n(j) = n}  sum_{c in C(p), (j,c) unmasked}  exp((s[j,c] + v[j]) / t)
//! ```
//!
//! Because `v[j]` does not depend on the column, the inner sum factors:
//!
//! ```text
//! b[p, j] = ln sum_{c in C(p), (j,c) unmasked} exp(s[j,c] / t)      (independent of v)
//! A[p, n] = ln sum_{j : n(j) = n} exp(b[p, j] + v[j] / t)
//! ```
//!
//! `b` is computed once per episode; each inner-loop step only costs
//! `O(N*K * N*K*L)`. The loss is
//!
//! ```text
//! loss = sum_p ( ln sum_n exp(A[p, n]) - A[p, y(p)] )
//! ```
//!
//! With `P[p, n] = softmax_n(A[p, .])`, the chain rule gives
//! `d loss / d A[p, n] = P[p, n] - [n = y(p)]`, and differentiating the
//! LogSumExp gives `d A[p, n(j)] / d v[j] = w[p, j] / t` where
//! `w[p, j] = exp(b[p, j] + v[j]/t - A[p, n(j)])` is the share of row `j`
//! within its class aggregate (zero if `b[p, j] = -inf`). `v[j]` reaches no
//! other class logit, so
//!
//! ```text
//! d loss / d v[j] = (1/t) * sum_p (P[p, n(j)] - [n(j) = y(p)]) * w[p, j]
//! ```
//!
//! Summed over `j`, the `w` of each class add up to one, so
//! `sum_j d loss / d v[j] = (1/t) sum_p sum_n (P[p, n] - [n = y(p)]) = 0`,
//! which is the shift invariance of the loss. Only first derivatives are
//! involved.

use crate::error::{Error, Result};
use crate::similarity::{
    apply_reweighting, class_logits, cosine_matrix, logsumexp, softmax, ImportanceWeights,
    SimilarityTensor,
};
use crate::token_model::{flatten_support, ClassifierConfig, Episode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Every same-image pair is masked.
    BlockDiagonal,
    /// Same-image pairs within an `m x m` window centred at the column token.
    LocalWindow(usize),
    /// Arbitrary pair set.
    Custom,
}

/// Masked pairs of the `(N*K*L) x (N*K*L)` support-vs-support matrix.
/// Rows are support tokens, columns are pseudo-query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    mode: MaskMode,
    size: usize,
    masked: Vec<bool>,
}

impl Mask {
    /// Mask from explicit `(row, col)` pairs.
    pub fn from_pairs(
        size: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut masked = vec![false; size * size];
        for (r, c) in pairs {
            if r >= size || c >= size {
                return Err(Error::ShapeMismatch(format!(
                    "mask pair ({r}, {c}) outside {size}x{size}"
                )));
            }
            masked[r * size + c] = true;
        }
        Ok(Self {
            mode: MaskMode::Custom,
            size,
            masked,
        })
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Side length `N*K*L`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.size + col]
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / self.size, i % self.size))
    }

    /// Mask for an episode: block-diagonal for `K > 1`, local window of
    /// side `window` for `K = 1`.
    pub fn for_episode(episode: &Episode, window: usize) -> Result<Self> {
        let shape = episode.shape();
        build_mask(
            episode.n_way(),
            episode.k_shot(),
            shape.len,
            shape.grid_h,
            shape.grid_w,
            window,
        )
    }
}

pub fn build_mask(
    n_way: usize,
    k_shot: usize,
    len: usize,
    grid_h: usize,
    grid_w: usize,
    window: usize,
) -> Result<Mask> {
    if grid_h * grid_w != len || len == 0 {
        return Err(Error::InvalidGrid(format!(
            "grid {grid_h}x{grid_w} does not hold {len} tokens"
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "mask window must be odd and >= 1, got {window}"
        )));
    }
    let images = n_way * k_shot;
    let size = images * len;
    let mut masked = vec![false; size * size];
    let mode = if k_shot > 1 {
        MaskMode::BlockDiagonal
    } else {
        MaskMode::LocalWindow(window)
    };
    let half = window / 2;
    for image in 0..images {
        let base = image * len;
        for col in 0..len {
            let (cr, cc) = (col / grid_w, col % grid_w);
            for row in 0..len {
                let (rr, rc) = (row / grid_w, row % grid_w);
                let hit = match mode {
                    MaskMode::LocalWindow(_) => rr.abs_diff(cr) <= half && rc.abs_diff(cc) <= half,
                    _ => true,
                };
                if hit {
                    masked[(base + row) * size + base + col] = true;
                }
            }
        }
    }
    Ok(Mask { mode, size, masked })
}

fn check_mask(episode: &Episode, mask: &Mask) -> Result<()> {
    if mask.size() != episode.num_support_tokens() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {0}x{0}, episode has {1} support tokens",
            mask.size(),
            episode.num_support_tokens()
        )));
    }
    Ok(())
}

fn check_weights(problem_rows: usize, v: &ImportanceWeights) -> Result<()> {
    if v.len() != problem_rows {
        return Err(Error::ShapeMismatch(format!(
            "{} importance weights for {problem_rows} support tokens",
            v.len()
        )));
    }
    Ok(())
}

/// Support-vs-support cosine similarities with masked pairs set to `-inf`.
/// Columns are grouped per pseudo-query image, `L` columns each.
pub fn masked_support_similarity(episode: &Episode, mask: &Mask) -> Result<SimilarityTensor> {
    check_mask(episode, mask)?;
    let support = flatten_support(episode);
    let values = cosine_matrix(&support.tokens, &support.tokens, support.dim);
    let mut s = SimilarityTensor::from_parts(
        values,
        support.token_class,
        episode.n_way(),
        episode.tokens_per_image(),
    )?;
    for (r, c) in mask.pairs() {
        s.set(r, c, f64::NEG_INFINITY);
    }
    Ok(s)
}

/// Precomputed self-classification problem for one episode.
///
/// Holds the per-(pseudo-query, support token) reductions `b[p, j]` so that
/// evaluating logits, loss and gradient for a new `v` never touches the
/// similarity matrix again.
#[derive(Debug, Clone)]
pub struct SupportProblem {
    n_way: usize,
    k_shot: usize,
    rows: usize,
    tau: f64,
    row_class: Vec<usize>,
    /// `pseudo_queries x rows`.
    row_lse: Vec<f64>,
}

impl SupportProblem {
    pub fn new(episode: &Episode, mask: &Mask, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
        }
        let s = masked_support_similarity(episode, mask)?;
        let len = episode.tokens_per_image();
        let pseudo = episode.num_support_images();
        let rows = s.rows();
        let mut row_lse = Vec::with_capacity(pseudo * rows);
        for p in 0..pseudo {
            let cols = p * len..(p + 1) * len;
            for j in 0..rows {
                row_lse.push(logsumexp(cols.clone().map(|c| s.get(j, c) / tau)));
            }
        }
        Ok(Self {
            n_way: episode.n_way(),
            k_shot: episode.k_shot(),
            rows,
            tau,
            row_class: s.row_class().to_vec(),
            row_lse,
        })
    }

    pub fn num_pseudo_queries(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn num_support_tokens(&self) -> usize {
        self.rows
    }

    fn label(&self, p: usize) -> usize {
        p / self.k_shot
    }

    fn b(&self, p: usize) -> &[f64] {
        &self.row_lse[p * self.rows..(p + 1) * self.rows]
    }

    /// `(N*K) x N` class logits, row-major.
    pub fn logits(&self, v: &ImportanceWeights) -> Result<Vec<f64>> {
        check_weights(self.rows, v)?;
        Ok(self.logits_unchecked(v.as_slice()))
    }

    fn logits_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_pseudo_queries() * self.n_way);
        let rows_per_class = self.rows / self.n_way;
        for p in 0..self.num_pseudo_queries() {
            let b = self.b(p);
            for n in 0..self.n_way {
                let class_rows = n * rows_per_class..(n + 1) * rows_per_class;
                out.push(logsumexp(class_rows.map(|j| b[j] + v[j] / self.tau)));
            }
        }
        out
    }

    /// Summed cross-entropy; `+inf` if some pseudo-query's true class has no
    /// unmasked pair.
    pub fn loss(&self, v: &ImportanceWeights) -> Result<f64> {
        check_weights(self.rows, v)?;
        let logits = self.logits_unchecked(v.as_slice());
        Ok(self.loss_from_logits(&logits))
    }

    fn loss_from_logits(&self, logits: &[f64]) -> f64 {
        logits
            .chunks(self.n_way)
            .enumerate()
            .map(|(p, a)| {
                let target = a[self.label(p)];
                if target == f64::NEG_INFINITY {
                    f64::INFINITY
                } else {
                    logsumexp(a.iter().copied()) - target
                }
            })
            .sum()
    }

    /// Loss and its gradient with respect to `v`.
    pub fn loss_and_gradient(&self, v: &ImportanceWeights) -> Result<(f64, Vec<f64>)> {
        check_weights(self.rows, v)?;
        let v = v.as_slice();
        let logits = self.logits_unchecked(v);
        let loss = self.loss_from_logits(&logits);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let mut grad = vec![0.0; self.rows];
        for (p, a) in logits.chunks(self.n_way).enumerate() {
            let probs = softmax(a);
            let label = self.label(p);
            let b = self.b(p);
            for j in 0..self.rows {
                let n = self.row_class[j];
                if b[j] == f64::NEG_INFINITY {
                    continue;
                }
                let residual = probs[n] - if n == label { 1.0 } else { 0.0 };
                let share = (b[j] + v[j] / self.tau - a[n]).exp();
                grad[j] += residual * share;
            }
        }
        grad.iter_mut().for_each(|g| *g /= self.tau);
        Ok((loss, grad))
    }

    pub fn gradient(&self, v: &ImportanceWeights) -> Result<Vec<f64>> {
        self.loss_and_gradient(v).map(|(_, g)| g)
    }
}

/// Class logits of every support image classified against the masked,
/// reweighted support set. Row `p` is support image `p` (class `p / K`).
pub fn support_self_logits(
    episode: &Episode,
    v: &ImportanceWeights,
    mask: &Mask,
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    let problem = SupportProblem::new(episode, mask, tau)?;
    let flat = problem.logits(v)?;
    Ok(flat.chunks(episode.n_way()).map(<[f64]>::to_vec).collect())
}

/// Same logits as [`support_self_logits`], evaluated directly on the full
/// masked similarity tensor instead of the per-row reductions.
pub fn support_self_logits_dense(
    episode: &Episode,
    v: &ImportanceWeights,
    mask: &Mask,
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    let s = masked_support_similarity(episode, mask)?;
    let s = apply_reweighting(&s, v)?;
    (0..episode.num_support_images())
        .map(|p| class_logits(&s, tau, p))
        .collect()
}

pub fn support_loss(
    episode: &Episode,
    v: &ImportanceWeights,
    mask: &Mask,
    tau: f64,
) -> Result<f64> {
    SupportProblem::new(episode, mask, tau)?.loss(v)
}

pub fn support_loss_gradient(
    episode: &Episode,
    v: &ImportanceWeights,
    mask: &Mask,
    tau: f64,
) -> Result<Vec<f64>> {
    SupportProblem::new(episode, mask, tau)?.gradient(v)
}

/// Loss history and final weights of one inner-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopTrace {
    /// Loss before each step, then after the last one.
    pub losses: Vec<f64>,
    pub v_final: ImportanceWeights,
    pub steps_taken: usize,
}

/// Plain gradient descent from `v = 0`. Returns the trace plus a copy of
/// `v` after each step count listed in `snapshots` (counts above `steps`
/// are ignored).
pub fn descend(
    problem: &SupportProblem,
    lr: f64,
    steps: usize,
    snapshots: &[usize],
) -> Result<(InnerLoopTrace, Vec<ImportanceWeights>)> {
    let mut v = ImportanceWeights::zeros(problem.num_support_tokens());
    let mut losses = Vec::with_capacity(steps + 1);
    let mut saved = Vec::new();
    for step in 0..=steps {
        if snapshots.contains(&step) {
            saved.push(v.clone());
        }
        if step == steps {
            let loss = problem.loss(&v)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            losses.push(loss);
            break;
        }
        let (loss, grad) = problem.loss_and_gradient(&v).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        losses.push(loss);
        for (x, g) in v.as_mut_slice().iter_mut().zip(&grad) {
            *x -= lr * g;
        }
    }
    Ok((
        InnerLoopTrace {
            losses,
            v_final: v,
            steps_taken: steps,
        },
        saved,
    ))
}

/// Fits importance weights for an episode with the configured mask,
/// temperature, learning rate and step count.
pub fn optimize_importance(episode: &Episode, cfg: &ClassifierConfig) -> Result<InnerLoopTrace> {
    cfg.validate()?;
    let mask = Mask::for_episode(episode, cfg.mask_window)?;
    let problem = SupportProblem::new(episode, &mask, cfg.tau)?;
    descend(&problem, cfg.lr, cfg.steps, &[]).map(|(trace, _)| trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_model::TokenGrid;
    use std::sync::Arc;

    fn grid(tokens: Vec<f32>, dim: usize, gh: usize, gw: usize, id: &str) -> Arc<TokenGrid> {
        Arc::new(TokenGrid::new(tokens, dim, gh, gw, id).unwrap())
    }

    #[test]
    fn block_diagonal_count() {
        let m = build_mask(2, 2, 4, 2, 2, 5).unwrap();
        assert_eq!(m.mode(), MaskMode::BlockDiagonal);
        assert_eq!(m.size(), 16);
        assert_eq!(m.count(), 64);
        assert!(m.contains(0, 3) && m.contains(5, 6) && !m.contains(3, 4));
    }

    #[test]
    fn window_clipped_at_corner() {
        let m = build_mask(2, 1, 16, 4, 4, 5).unwrap();
        assert_eq!(m.mode(), MaskMode::LocalWindow(5));
        let in_own_image = (0..16).filter(|&r| m.contains(r, 0)).count();
        assert_eq!(in_own_image, 9);
        assert!((16..32).all(|r| !m.contains(r, 0)));
    }

    #[test]
    fn window_covers_full_5x5_from_centre() {
        let m = build_mask(1, 1, 25, 5, 5, 5).unwrap();
        assert_eq!((0..25).filter(|&r| m.contains(r, 12)).count(), 25);
    }

    #[test]
    fn unit_window_masks_only_self() {
        let m = build_mask(2, 1, 9, 3, 3, 1).unwrap();
        assert_eq!(m.count(), 18);
        assert!(m.pairs().all(|(r, c)| r == c));
    }

    #[test]
    fn mask_rejects_bad_input() {
        assert!(build_mask(2, 1, 9, 3, 3, 4).is_err());
        assert!(build_mask(2, 1, 8, 3, 3, 3).is_err());
    }

    /// Two classes, two shots; image A of class 0 matches its duplicate B and
    /// nothing else.
    fn duplicate_episode() -> Episode {
        let a = grid(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 3, 1, 2, "a");
        let b = grid(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 3, 1, 2, "b");
        let c = grid(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 3, 1, 2, "c");
        let d = grid(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 3, 1, 2, "d");
        Episode::new(2, 2, vec![(a, 0), (b, 0), (c, 1), (d, 1)], vec![]).unwrap()
    }

    #[test]
    fn duplicate_image_dominates_despite_own_block_masked() {
        let ep = duplicate_episode();
        let mask = Mask::for_episode(&ep, 5).unwrap();
        let logits = support_self_logits(&ep, &ImportanceWeights::zeros(8), &mask, 0.1).unwrap();
        assert!(logits[0][0] > logits[0][1] + 1.0);
        assert!(logits[2][1] > logits[2][0] + 1.0);
    }

    #[test]
    fn fully_masked_class_has_neg_infinite_logit() {
        let ep = duplicate_episode();
        // mask every row of class 1 against every column
        let mask = Mask::from_pairs(8, (4..8).flat_map(|r| (0..8).map(move |c| (r, c)))).unwrap();
        let logits = support_self_logits(&ep, &ImportanceWeights::zeros(8), &mask, 0.5).unwrap();
        assert!(logits.iter().all(|row| row[1] == f64::NEG_INFINITY));
        let loss = support_loss(&ep, &ImportanceWeights::zeros(8), &mask, 0.5).unwrap();
        assert_eq!(loss, f64::INFINITY);
        assert!(matches!(
            support_loss_gradient(&ep, &ImportanceWeights::zeros(8), &mask, 0.5),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn identical_tokens_give_chance_loss() {
        let t = vec![0.3, 0.4, -0.2, 0.1, 0.0, 0.9];
        let support = (0..3)
            .flat_map(|c| (0..2).map(move |s| (c, s)))
            .map(|(c, s)| (grid(t.clone(), 3, 1, 2, &format!("{c}{s}")), c))
            .collect();
        let ep = Episode::new(3, 2, support, vec![]).unwrap();
        let v = ImportanceWeights::zeros(12);
        // without masking every class aggregates the same terms
        let open = Mask::from_pairs(12, []).unwrap();
        let loss = support_loss(&ep, &v, &open, 0.4).unwrap();
        assert!((loss - 6.0 * 3f64.ln()).abs() < 1e-12);
        // the block mask leaves one true-class image against two per wrong class
        let mask = Mask::for_episode(&ep, 5).unwrap();
        let loss = support_loss(&ep, &v, &mask, 0.4).unwrap();
        assert!((loss - 6.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_size_must_match_episode() {
        let ep = duplicate_episode();
        let mask = build_mask(2, 2, 3, 1, 3, 1).unwrap();
        assert!(SupportProblem::new(&ep, &mask, 1.0).is_err());
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let ep = duplicate_episode();
        let cfg = ClassifierConfig {
            steps: 0,
            ..ClassifierConfig::for_dim(3)
        };
        let trace = optimize_importance(&ep, &cfg).unwrap();
        assert_eq!(trace.v_final, ImportanceWeights::zeros(8));
        assert_eq!(trace.losses.len(), 1);
        assert_eq!(trace.steps_taken, 0);
    }

    #[test]
    fn one_step_is_negative_scaled_gradient() {
        let ep = duplicate_episode();
        let cfg = ClassifierConfig {
            steps: 1,
            ..ClassifierConfig::for_dim(3)
        };
        let mask = Mask::for_episode(&ep, cfg.mask_window).unwrap();
        let g = support_loss_gradient(&ep, &ImportanceWeights::zeros(8), &mask, cfg.tau).unwrap();
        let trace = optimize_importance(&ep, &cfg).unwrap();
        let expected: Vec<f64> = g.iter().map(|x| 0.0 - cfg.lr * x).collect();
        assert_eq!(trace.v_final.as_slice(), expected.as_slice());
        assert_eq!(trace.losses.len(), 2);
    }

    #[test]
    fn degenerate_one_shot_window_reports_step() {
        // 2x2 grid with a 5x5 window masks each image entirely.
        let support = (0..2)
            .map(|c| (grid(vec![1.0, 0.5, 0.2, 0.1], 1, 2, 2, &c.to_string()), c))
            .collect();
        let ep = Episode::new(2, 1, support, vec![]).unwrap();
        let cfg = ClassifierConfig::for_dim(1);
        assert!(matches!(
            optimize_importance(&ep, &cfg),
            Err(Error::NonFiniteLoss { step: 0 })
        ));
    }

    #[test]
    fn snapshots_match_shorter_runs() {
        let ep = duplicate_episode();
        let mask = Mask::for_episode(&ep, 5).unwrap();
        let problem = SupportProblem::new(&ep, &mask, 0.5).unwrap();
        let (_, snaps) = descend(&problem, 0.1, 6, &[0, 3, 6]).unwrap();
        let (t3, _) = descend(&problem, 0.1, 3, &[]).unwrap();
        let (t6, _) = descend(&problem, 0.1, 6, &[]).unwrap();
        assert_eq!(snaps[0], ImportanceWeights::zeros(8));
        assert_eq!(snaps[1], t3.v_final);
        assert_eq!(snaps[2], t6.v_final);
    }
}
