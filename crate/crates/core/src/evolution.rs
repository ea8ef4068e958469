//! Regularized (aging) evolution driven by an arbitrary score function, and
//! the warm-up-then-score pipeline used as its default objective.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchSpace, Genotype, ResourceConstraint};
use crate::data::Dataset;
use crate::proxy::{self, ProxyError, ProxyScore, ProxyWeights, SigeoOptions};
use crate::rng;
use crate::trainer::{self, TrainConfig, TrainError};
use crate::data::BatchStream;

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("invalid evolution config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    pub population_size: usize,
    pub iterations: usize,
    pub tournament_size: usize,
    pub children_per_iter: usize,
    pub constraint: ResourceConstraint,
    pub seed: u64,
}

impl EvoConfig {
    /// Desk-scale default: population 16, 60 iterations, tournament 8, 4 children.
    pub fn desk(constraint: ResourceConstraint, seed: u64) -> Self {
        Self {
            population_size: 16,
            iterations: 60,
            tournament_size: 8,
            children_per_iter: 4,
            constraint,
            seed,
        }
    }

    /// Population 128, 240 iterations, best of 64 sampled, 8 children.
    pub fn large_scale(constraint: ResourceConstraint, seed: u64) -> Self {
        Self {
            population_size: 128,
            iterations: 240,
            tournament_size: 64,
            children_per_iter: 8,
            constraint,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        if self.population_size == 0 {
            return Err(EvoError::BadConfig("population_size must be >= 1".into()));
        }
        if self.tournament_size == 0 || self.tournament_size > self.population_size {
            return Err(EvoError::BadConfig(format!(
                "tournament_size {} must be in [1, population_size = {}]",
                self.tournament_size, self.population_size
            )));
        }
        if self.children_per_iter == 0 {
            return Err(EvoError::BadConfig("children_per_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub genotype: Genotype,
    pub id: crate::arch::GenotypeId,
    #[serde(with = "finite_or_null")]
    pub score: f64,
    /// Iteration that inserted the member (0 for the initial population).
    pub born: usize,
    /// Position in the global evaluation order.
    pub serial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub evaluations: usize,
    #[serde(with = "finite_or_null")]
    pub best_so_far: f64,
    #[serde(with = "finite_or_null")]
    pub population_best: f64,
    #[serde(with = "finite_or_null")]
    pub population_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoHistory {
    /// Record 0 describes the initial population; record `t` the state after iteration `t`.
    pub records: Vec<IterationRecord>,
    /// Every scored genotype in evaluation order.
    pub evaluated: Vec<Member>,
    pub final_population: Vec<Member>,
    pub best: Member,
}

impl EvoHistory {
    /// `iteration,evaluations,best_so_far,population_mean` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "evaluations", "best_so_far", "population_mean"])
            .unwrap();
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.evaluations.to_string(),
                fmt_score(r.best_so_far),
                fmt_score(r.population_mean),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

pub(crate) fn fmt_score(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Higher score wins; equal scores go to the lower genotype id.
fn better(a: &Member, b: &Member) -> bool {
    match a.score.total_cmp(&b.score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.id < b.id,
    }
}

fn best_of<'a>(members: impl IntoIterator<Item = &'a Member>) -> Option<&'a Member> {
    members.into_iter().fold(None, |acc, m| match acc {
        Some(b) if !better(m, b) => Some(b),
        _ => Some(m),
    })
}

/// Runs aging evolution.
///
/// 1. Sample and score `population_size` genotypes.
/// 2. Each iteration: draw `tournament_size` members without replacement,
///    take the best as parent, create `children_per_iter` single-locus mutants,
///    score them, and append each one while removing the oldest member.
///
/// Children are generated sequentially from the run's generator and scored in
/// parallel on up to `workers` threads; insertion follows child index, so the
/// history does not depend on `workers`. Scores must be deterministic per
/// genotype and never NaN (`-inf` is allowed).
pub fn regularized_evolution<F>(space: &ArchSpace, score_fn: F, cfg: &EvoConfig, workers: usize) -> Result<EvoHistory, EvoError>
where
    F: Fn(&Genotype) -> f64 + Sync,
{
    cfg.validate()?;
    let space = ArchSpace {
        constraint: cfg.constraint,
        ..space.clone()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvoError::Pool(e.to_string()))?;
    let score_all = |gs: &[Genotype]| -> Vec<f64> {
        pool.install(|| gs.par_iter().map(&score_fn).collect())
    };

    let mut rng = rng::seeded(cfg.seed);
    let mut evaluated: Vec<Member> = Vec::new();
    let mut population: VecDeque<Member> = VecDeque::with_capacity(cfg.population_size);

    let initial = (0..cfg.population_size)
        .map(|_| space.sample_random(&mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    for (g, score) in initial.iter().zip(score_all(&initial)) {
        let m = Member {
            id: g.id(),
            genotype: g.clone(),
            score,
            born: 0,
            serial: evaluated.len(),
        };
        evaluated.push(m.clone());
        population.push_back(m);
    }

    let mut best = best_of(&evaluated).expect("population is non-empty").clone();
    let mut records = vec![record(0, evaluated.len(), &best, &population)];

    for iteration in 1..=cfg.iterations {
        let picks = index::sample(&mut rng, population.len(), cfg.tournament_size);
        let parent = best_of(picks.iter().map(|i| &population[i]))
            .expect("tournament is non-empty")
            .genotype
            .clone();
        let children = (0..cfg.children_per_iter)
            .map(|_| space.mutate(&parent, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        for (g, score) in children.iter().zip(score_all(&children)) {
            let m = Member {
                id: g.id(),
                genotype: g.clone(),
                score,
                born: iteration,
                serial: evaluated.len(),
            };
            if better(&m, &best) {
                best = m.clone();
            }
            evaluated.push(m.clone());
            population.push_back(m);
            population.pop_front();
        }
        records.push(record(iteration, evaluated.len(), &best, &population));
    }

    Ok(EvoHistory {
        records,
        evaluated,
        final_population: population.into_iter().collect(),
        best,
    })
}

fn record(iteration: usize, evaluations: usize, best: &Member, population: &VecDeque<Member>) -> IterationRecord {
    let population_best = best_of(population).map_or(f64::NEG_INFINITY, |m| m.score);
    let population_mean = population.iter().map(|m| m.score).sum::<f64>() / population.len() as f64;
    IterationRecord {
        iteration,
        evaluations,
        best_so_far: best.score,
        population_best,
        population_mean,
    }
}

/// How a single candidate is warmed up and scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreProtocol {
    pub warmup_fraction: f64,
    pub k: usize,
    pub weights: ProxyWeights,
    #[serde(default)]
    pub options: SigeoOptions,
    /// Optimizer and batch stream used for warm-up and proxy batches.
    pub train: TrainConfig,
    /// Base seed; the candidate's init seed is derived from it and the genotype id.
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("protocol needs k >= 2, got {0}")]
    BadK(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub fn candidate_init_seed(base: u64, g: &Genotype) -> u64 {
    rng::derive_seed(base, &[g.id().0])
}

/// Instantiate, warm up, accumulate statistics on the `k` batches that
/// follow the warm-up prefix, and compute the weighted score.
pub fn score_candidate(space: &ArchSpace, train: &Dataset, g: &Genotype, protocol: &ScoreProtocol) -> Result<ProxyScore, ScoreError> {
    if protocol.k < 2 {
        return Err(ScoreError::BadK(protocol.k));
    }
    let mut net = space.instantiate(g, candidate_init_seed(protocol.seed, g));
    let steps = trainer::warmup(&mut net, train, protocol.warmup_fraction, &protocol.train)?;
    let mut stream = BatchStream::new(train, protocol.train.batch_size, protocol.train.shuffle_seed)?;
    let batches = stream.take_batches(steps, protocol.k);
    let stats = proxy::accumulate_grad_stats(&net, &batches)?;
    Ok(proxy::sigeo_with(
        &stats,
        &protocol.weights,
        protocol.options,
        protocol.warmup_fraction,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{SpaceKind, TaskShape};
    use crate::data::synth_gaussian;

    fn mlp_space() -> ArchSpace {
        ArchSpace::new(
            SpaceKind::Mlp { min_depth: 1, max_depth: 3 },
            TaskShape { input_dim: 784, num_classes: 10 },
            ResourceConstraint::unbounded(),
        )
        .unwrap()
    }

    fn planted(space: &ArchSpace) -> impl Fn(&Genotype) -> f64 + Sync + '_ {
        move |g| -(space.param_count(g) as f64)
    }

    #[test]
    fn planted_optimum_on_each_mlp_depth() {
        for depth in 1..=3 {
            let space = ArchSpace {
                kind: SpaceKind::Mlp { min_depth: depth, max_depth: depth },
                ..mlp_space()
            };
            let optimum = if depth < 3 {
                space
                    .enumerate()
                    .into_iter()
                    .min_by_key(|g| space.param_count(g))
                    .unwrap()
            } else {
                Genotype::mlp(vec![2, 2, 2]).unwrap()
            };
            let cfg = EvoConfig { iterations: 100, ..EvoConfig::desk(ResourceConstraint::unbounded(), 3) };
            let h = regularized_evolution(&space, planted(&space), &cfg, 2).unwrap();
            assert_eq!(h.best.genotype, optimum, "depth {depth}");
            assert_eq!(h.evaluated.len(), 16 + 100 * 4);
            assert_eq!(h.records.len(), 101);
        }
    }

    #[test]
    fn zero_iterations_returns_best_initial() {
        let space = mlp_space();
        let cfg = EvoConfig { iterations: 0, ..EvoConfig::desk(ResourceConstraint::unbounded(), 4) };
        let h = regularized_evolution(&space, planted(&space), &cfg, 1).unwrap();
        assert_eq!(h.evaluated.len(), 16);
        let max = h.evaluated.iter().map(|m| m.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(h.best.score, max);
        assert_eq!(h.final_population, h.evaluated);
    }

    #[test]
    fn history_is_deterministic_across_workers() {
        let space = mlp_space();
        let cfg = EvoConfig::desk(ResourceConstraint::unbounded(), 5);
        let a = regularized_evolution(&space, planted(&space), &cfg, 1).unwrap();
        let b = regularized_evolution(&space, planted(&space), &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn population_size_aging_and_monotone_best() {
        let space = mlp_space();
        let cfg = EvoConfig { population_size: 10, children_per_iter: 3, ..EvoConfig::desk(ResourceConstraint::unbounded(), 6) };
        let h = regularized_evolution(&space, planted(&space), &cfg, 1).unwrap();
        assert_eq!(h.final_population.len(), 10);
        let lifetime = cfg.population_size.div_ceil(cfg.children_per_iter);
        assert!(h.final_population.iter().all(|m| m.born + lifetime >= cfg.iterations));
        let serials: Vec<usize> = h.final_population.iter().map(|m| m.serial).collect();
        assert_eq!(serials, (h.evaluated.len() - 10..h.evaluated.len()).collect::<Vec<_>>());
        for w in h.records.windows(2) {
            assert!(w[1].best_so_far >= w[0].best_so_far);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        let space = mlp_space();
        let cfg = EvoConfig { iterations: 5, ..EvoConfig::desk(ResourceConstraint::unbounded(), 7) };
        let h = regularized_evolution(&space, |_| 1.0, &cfg, 1).unwrap();
        let lowest = h.evaluated.iter().map(|m| m.id).min().unwrap();
        assert_eq!(h.best.id, lowest);
    }

    #[test]
    fn config_validation() {
        let space = mlp_space();
        let bad = EvoConfig { tournament_size: 17, ..EvoConfig::desk(ResourceConstraint::unbounded(), 0) };
        assert!(matches!(regularized_evolution(&space, |_| 0.0, &bad, 1), Err(EvoError::BadConfig(_))));
        let none = EvoConfig { children_per_iter: 0, ..EvoConfig::desk(ResourceConstraint::unbounded(), 0) };
        assert!(none.validate().is_err());
    }

    fn protocol(warmup_fraction: f64) -> ScoreProtocol {
        ScoreProtocol {
            warmup_fraction,
            k: 4,
            weights: ProxyWeights::WARMED,
            options: SigeoOptions::default(),
            train: TrainConfig { batch_size: 32, ..TrainConfig::default() },
            seed: 9,
        }
    }

    #[test]
    fn zero_warmup_is_pure_zero_shot() {
        let ds = synth_gaussian(100, 6, 3, 3.0, 1).unwrap();
        let space = ArchSpace::new(
            SpaceKind::default_cell(),
            TaskShape { input_dim: 6, num_classes: 3 },
            ResourceConstraint::unbounded(),
        )
        .unwrap();
        let g = space.sample_random(&mut rng::seeded(2)).unwrap();
        let p = protocol(0.0);
        let net = space.instantiate(&g, candidate_init_seed(p.seed, &g));
        let mut stream = BatchStream::new(&ds, 32, 0).unwrap();
        let stats = proxy::accumulate_grad_stats(&net, &stream.take_batches(0, 4)).unwrap();
        let direct = proxy::sigeo(&stats, &ProxyWeights::WARMED).value;
        assert_eq!(score_candidate(&space, &ds, &g, &p).unwrap().value, direct);
        assert!(matches!(
            score_candidate(&space, &ds, &g, &ScoreProtocol { k: 1, ..p }),
            Err(ScoreError::BadK(1))
        ));
    }

    #[test]
    fn score_regressions() {
        let ds = synth_gaussian(100, 6, 3, 3.0, 1).unwrap();
        let space = ArchSpace::new(
            SpaceKind::Mlp { min_depth: 1, max_depth: 2 },
            TaskShape { input_dim: 6, num_classes: 3 },
            ResourceConstraint::unbounded(),
        )
        .unwrap();
        let a = Genotype::mlp(vec![8]).unwrap();
        let b = Genotype::mlp(vec![16, 4]).unwrap();
        let sa = score_candidate(&space, &ds, &a, &protocol(0.4)).unwrap().value;
        let sb = score_candidate(&space, &ds, &b, &protocol(0.1)).unwrap().value;
        assert_eq!(sa, 2.6257178720506453);
        assert_eq!(sb, 10.289844464423163);
    }
}
