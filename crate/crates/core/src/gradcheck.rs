//! Finite-difference verification of the analytic support-loss gradient.

use rand::Rng;

use crate::error::Result;
use crate::eval::episode_rng;
use crate::reweighting::{Mask, SupportProblem};
use crate::similarity::ImportanceWeights;
use crate::synth;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences of the support loss at `v`.
pub fn finite_difference_gradient(
    problem: &SupportProblem,
    v: &ImportanceWeights,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = v.as_slice().to_vec();
    (0..probe.len())
        .map(|j| {
            let x = probe[j];
            probe[j] = x + h;
            let up = problem.loss(&ImportanceWeights::new(probe.clone())?)?;
            probe[j] = x - h;
            let down = problem.loss(&ImportanceWeights::new(probe.clone())?)?;
            probe[j] = x;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub n_way: usize,
    pub k_shot: usize,
    pub len: usize,
    pub dim: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: Vec<Trial>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.trials
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }
}

/// Runs `trials` random episodes with `N in {2,5}`, `K in {1,2}`,
/// `L in {4,9}` and `D in {3,8}`, at a random `v`. One-shot episodes use a
/// unit window on 2x2 grids and a 3x3 window on 3x3 grids; a 5x5 window
/// would mask those images completely.
///
/// `fault` multiplies the analytic gradient before comparison and exists
/// only to exercise the failure path.
pub fn run(seed: u64, trials: usize, fault: Option<f64>) -> Result<GradcheckReport> {
    let trials = (0..trials)
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            let n_way = [2, 5][rng.random_range(0..2)];
            let k_shot = rng.random_range(1..=2);
            let len = [4, 9][rng.random_range(0..2)];
            let dim = [3, 8][rng.random_range(0..2)];
            let (gh, gw) = synth::square_grid(len);
            let episode = synth::random_episode(&mut rng, n_way, k_shot, 0, gh, gw, dim);
            let window = if len == 4 { 1 } else { 3 };
            let tau = 1.0 / (dim as f64).sqrt();
            let mask = Mask::for_episode(&episode, window)?;
            let problem = SupportProblem::new(&episode, &mask, tau)?;
            let v: Vec<f64> = (0..episode.num_support_tokens())
                .map(|_| 0.2 * (rng.random::<f64>() - 0.5))
                .collect();
            let v = ImportanceWeights::new(v)?;
            let mut analytic = problem.gradient(&v)?;
            if let Some(f) = fault {
                analytic.iter_mut().for_each(|g| *g *= f);
            }
            let numeric = finite_difference_gradient(&problem, &v, STEP)?;
            Ok(Trial {
                n_way,
                k_shot,
                len,
                dim,
                max_rel_error: max_relative_error(&analytic, &numeric),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { trials })
}
