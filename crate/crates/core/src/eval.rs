//! Episodic evaluation: sample N-way K-shot episodes from a class-partitioned
//! dataset, adapt the importance weights on each support set, classify the
//! queries and aggregate accuracy with a 95% confidence interval.
//!
//! Episode `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so
//! results do not depend on how episodes are distributed over threads.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::reweighting::{descend, Mask, SupportProblem};
use crate::similarity::{accuracy, predict, ImportanceWeights};
use crate::token_model::{ClassifierConfig, Episode, GridShape, TokenGrid};

/// Token grids grouped by class name. Class order is the name order.
#[derive(Debug, Clone)]
pub struct TokenDataset {
    shape: GridShape,
    classes: BTreeMap<String, Vec<Arc<TokenGrid>>>,
}

impl TokenDataset {
    pub fn new(classes: BTreeMap<String, Vec<Arc<TokenGrid>>>) -> Result<Self> {
        let shape = classes
            .values()
            .flat_map(|v| v.first())
            .map(|g| g.shape())
            .next()
            .ok_or_else(|| Error::Manifest("dataset has no images".into()))?;
        for (name, grids) in &classes {
            if grids.is_empty() {
                return Err(Error::Manifest(format!("class `{name}` has no images")));
            }
            if let Some(g) = grids.iter().find(|g| g.shape() != shape) {
                return Err(Error::Manifest(format!(
                    "class `{name}`: grid `{}` has shape {:?}, dataset uses {:?}",
                    g.image_id(),
                    g.shape(),
                    shape
                )));
            }
        }
        Ok(Self { shape, classes })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn classes(&self) -> &BTreeMap<String, Vec<Arc<TokenGrid>>> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_sweep: Option<Vec<usize>>,
}

impl EvalConfig {
    pub const DEFAULT_EPISODES: usize = 600;
    /// Common convention; not fixed by the method itself.
    pub const DEFAULT_N_QUERY: usize = 15;

    pub fn new(n_way: usize, k_shot: usize, classifier: ClassifierConfig) -> Self {
        Self {
            n_way,
            k_shot,
            n_query: Self::DEFAULT_N_QUERY,
            episodes: Self::DEFAULT_EPISODES,
            seed: 0,
            classifier,
            steps_sweep: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_way must be >= 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot < 1 {
            return Err(Error::InvalidConfig("k_shot must be >= 1".into()));
        }
        if self.episodes < 1 {
            return Err(Error::InvalidConfig("episodes must be >= 1".into()));
        }
        if matches!(&self.steps_sweep, Some(s) if s.is_empty()) {
            return Err(Error::InvalidConfig("steps sweep is empty".into()));
        }
        self.classifier.validate()
    }

    /// Step counts evaluated, in report order.
    pub fn step_counts(&self) -> Vec<usize> {
        self.steps_sweep
            .clone()
            .unwrap_or_else(|| vec![self.classifier.steps])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
    /// Mean wall time per episode; `None` when timing was not recorded.
    pub wall_ms_per_episode: Option<f64>,
}

/// Mean and half-width `1.96 * s / sqrt(n)` with the sample (n-1) standard
/// deviation. A single value has zero width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// RNG for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Samples `n_way` classes without replacement, then `k_shot + n_query`
/// grids per class without replacement. Class indices follow the sampled
/// class order.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &TokenDataset,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way > dataset.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "{n_way}-way episodes need {n_way} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    let names: Vec<&String> = dataset.classes.keys().collect();
    let chosen = rand::seq::index::sample(rng, names.len(), n_way).into_vec();
    let needed = k_shot + n_query;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut queries = Vec::with_capacity(n_way * n_query);
    for (label, &c) in chosen.iter().enumerate() {
        let grids = &dataset.classes[names[c]];
        if grids.len() < needed {
            return Err(Error::InsufficientSamples {
                class: names[c].clone(),
                available: grids.len(),
                needed,
            });
        }
        let picks = rand::seq::index::sample(rng, grids.len(), needed).into_vec();
        for (i, &g) in picks.iter().enumerate() {
            let grid = Arc::clone(&grids[g]);
            if i < k_shot {
                support.push((grid, label));
            } else {
                queries.push((grid, label));
            }
        }
    }
    Episode::new(n_way, k_shot, support, queries)
}

/// Importance weights after `steps` inner-loop steps (zeros for `steps = 0`).
pub fn adapt(episode: &Episode, cfg: &ClassifierConfig) -> Result<ImportanceWeights> {
    if cfg.steps == 0 {
        return Ok(ImportanceWeights::zeros(episode.num_support_tokens()));
    }
    let mask = Mask::for_episode(episode, cfg.mask_window)?;
    let problem = SupportProblem::new(episode, &mask, cfg.tau)?;
    descend(&problem, cfg.lr, cfg.steps, &[]).map(|(trace, _)| trace.v_final)
}

/// Adapts on the support set and returns the query accuracy.
pub fn run_episode(episode: &Episode, cfg: &ClassifierConfig) -> Result<f64> {
    let v = adapt(episode, cfg)?;
    let predictions = predict(episode, &v, cfg)?;
    Ok(accuracy(episode, &predictions))
}

/// Evaluates every step count of the configuration (one report each) on
/// the same sequence of episodes.
pub fn evaluate(
    dataset: &TokenDataset,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let step_counts = cfg.step_counts();
    let per_episode = par::map_indexed(cfg.episodes, exec, |index| {
        let mut rng = episode_rng(cfg.seed, index);
        let episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.n_query, &mut rng)?;
        step_counts
            .iter()
            .map(|&steps| {
                let start = Instant::now();
                let acc = run_episode(
                    &episode,
                    &ClassifierConfig {
                        steps,
                        ..cfg.classifier
                    },
                )?;
                Ok((acc, start.elapsed().as_secs_f64() * 1e3))
            })
            .collect::<Result<Vec<(f64, f64)>>>()
            .map_err(|e| Error::Episode {
                episode: index,
                source: Box::new(e),
            })
    });
    let per_episode = per_episode.into_iter().collect::<Result<Vec<_>>>()?;

    Ok(step_counts
        .iter()
        .enumerate()
        .map(|(i, &steps)| {
            let accs: Vec<f64> = per_episode.iter().map(|e| e[i].0).collect();
            let wall = per_episode.iter().map(|e| e[i].1).sum::<f64>() / cfg.episodes as f64;
            let (mean, ci95) = mean_ci95(&accs);
            EvalReport {
                config: EvalConfig {
                    classifier: ClassifierConfig {
                        steps,
                        ..cfg.classifier
                    },
                    steps_sweep: None,
                    ..cfg.clone()
                },
                mean,
                ci95,
                episodes: cfg.episodes,
                per_episode: accs,
                wall_ms_per_episode: Some(wall),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: usize, per_class: usize) -> TokenDataset {
        let map = (0..classes)
            .map(|c| {
                let grids = (0..per_class)
                    .map(|i| {
                        Arc::new(
                            TokenGrid::new(
                                vec![c as f32, i as f32 + 1.0],
                                2,
                                1,
                                1,
                                format!("{c}/{i}"),
                            )
                            .unwrap(),
                        )
                    })
                    .collect();
                (format!("c{c:02}"), grids)
            })
            .collect();
        TokenDataset::new(map).unwrap()
    }

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(mean_ci95(&[1.0, 1.0, 1.0]), (1.0, 0.0));
        assert_eq!(mean_ci95(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn ci_uses_sample_std() {
        let (m, ci) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        // s = sqrt(0.5)
        assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exact_fit_uses_every_grid() {
        let ds = dataset(3, 3);
        let ep = sample_episode(&ds, 3, 2, 1, &mut episode_rng(5, 0)).unwrap();
        let mut ids: Vec<String> = ep
            .support()
            .iter()
            .map(|g| g.image_id().to_string())
            .chain(ep.queries().iter().map(|(g, _)| g.image_id().to_string()))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 9);
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = dataset(10, 6);
        let a = sample_episode(&ds, 5, 2, 2, &mut episode_rng(11, 3)).unwrap();
        let b = sample_episode(&ds, 5, 2, 2, &mut episode_rng(11, 3)).unwrap();
        let c = sample_episode(&ds, 5, 2, 2, &mut episode_rng(11, 4)).unwrap();
        let ids = |e: &Episode| {
            e.support()
                .iter()
                .map(|g| g.image_id().to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn class_frequency_is_uniform() {
        let ds = dataset(20, 2);
        let mut counts = vec![0usize; 20];
        let mut rng = episode_rng(1, 0);
        for _ in 0..1000 {
            let ep = sample_episode(&ds, 5, 1, 0, &mut rng).unwrap();
            for g in ep.support() {
                let class: usize = g.image_id().split('/').next().unwrap().parse().unwrap();
                counts[class] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.25).abs() <= 0.05, "frequency {freq}");
        }
    }

    #[test]
    fn insufficient_samples() {
        let ds = dataset(5, 2);
        assert!(matches!(
            sample_episode(&ds, 2, 2, 1, &mut episode_rng(0, 0)),
            Err(Error::InsufficientSamples {
                available: 2,
                needed: 3,
                ..
            })
        ));
        assert!(sample_episode(&ds, 6, 1, 0, &mut episode_rng(0, 0)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = EvalConfig::new(5, 1, ClassifierConfig::for_dim(4));
        assert!(cfg.validate().is_ok());
        cfg.episodes = 0;
        assert!(cfg.validate().is_err());
        cfg.episodes = 1;
        cfg.steps_sweep = Some(vec![]);
        assert!(cfg.validate().is_err());
    }
}
