//! Experiment drivers: the width sweep relating early gradient statistics to
//! final losses, and the warm-up correlation study on sampled genotypes.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchSpace, Genotype, GenotypeId, ResourceConstraint, SpaceKind, WIDTH_GRID};
use crate::corr::{kendall_tau, spearman_rho};
use crate::data::{BatchStream, DataError, DataSplit};
use crate::evolution::fmt_score;
use crate::proxy::{self, GradStats, ProxyError, ProxyScore, ProxyWeights, SigeoOptions};
use crate::rng;
use crate::trainer::{self, LrSchedule, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Optimizer settings shared by warm-up and full training. The shuffle seed
/// is derived from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for SgdSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 128,
            epochs: 3,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl SgdSettings {
    pub fn with_shuffle_seed(&self, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            shuffle_seed,
            lr_schedule: self.lr_schedule,
        }
    }
}

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_SAMPLE: u64 = 0x5341_4d50;

/// Batch-order seed of an experiment run.
pub fn shuffle_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[STREAM_SHUFFLE])
}

/// Per-candidate init seed; depends only on the run seed and a candidate key.
pub fn init_seed(seed: u64, key: u64) -> u64 {
    rng::derive_seed(seed, &[STREAM_INIT, key])
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

fn check_levels(levels: &[f64]) -> Result<(), HarnessError> {
    if levels.is_empty() || levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(HarnessError::BadConfig("warm-up levels must be non-empty and within [0, 1]".into()));
    }
    Ok(())
}

/// Warm-up `net` in place and accumulate statistics on the following `k` batches.
fn warm_and_measure(net: &mut crate::tensor::Network, split: &DataSplit, level: f64, k: usize, cfg: &TrainConfig) -> Result<GradStats, HarnessError> {
    let steps = trainer::warmup(net, &split.train, level, cfg)?;
    let mut stream = BatchStream::new(&split.train, cfg.batch_size, cfg.shuffle_seed)?;
    let batches = stream.take_batches(steps, k);
    Ok(proxy::accumulate_grad_stats(net, &batches)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Hidden widths of the one-hidden-layer MLPs.
    pub widths: Vec<usize>,
    pub levels: Vec<f64>,
    pub k: usize,
    pub sgd: SgdSettings,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            widths: WIDTH_GRID.to_vec(),
            levels: vec![0.0, 0.1, 0.4],
            k: 4,
            sgd: SgdSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub width: usize,
    pub warmup_level: f64,
    pub cur_train_loss: f64,
    pub fr_norm: f64,
    pub mean_abs_grad: f64,
    pub zico_term: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
}

pub const THEORY_CSV_HEADER: [&str; 8] = [
    "width",
    "warmup_level",
    "cur_train_loss",
    "fr_norm",
    "mean_abs_grad",
    "zico_term",
    "final_train_loss",
    "final_test_loss",
];

/// Width sweep. For every width one network is trained to completion for the
/// final losses; for every level a copy with the same init seed is warmed up
/// on the prefix of that same run and measured on the next `k` batches.
/// Rows are ordered by width, then level.
pub fn run_theory_validation(split: &DataSplit, cfg: &TheoryConfig, workers: usize) -> Result<Vec<TheoryRow>, HarnessError> {
    check_levels(&cfg.levels)?;
    if cfg.k < 2 {
        return Err(ProxyError::TooFewBatches(cfg.k).into());
    }
    let task = split.task();
    let space = ArchSpace::new(
        SpaceKind::Mlp {
            min_depth: 1,
            max_depth: 1,
        },
        task,
        ResourceConstraint::unbounded(),
    )?;
    let train_cfg = cfg.sgd.with_shuffle_seed(shuffle_seed(cfg.seed));
    train_cfg.validate()?;
    let genotypes = cfg
        .widths
        .iter()
        .map(|&w| Genotype::mlp(vec![w]))
        .collect::<Result<Vec<_>, _>>()?;

    let per_width = pool(workers)?.install(|| {
        genotypes
            .par_iter()
            .map(|g| -> Result<Vec<TheoryRow>, HarnessError> {
                let width = match g.arch() {
                    crate::arch::Architecture::Mlp { widths } => widths[0],
                    _ => unreachable!(),
                };
                let seed = init_seed(cfg.seed, width as u64);
                let mut full = space.instantiate(g, seed);
                let report = trainer::train_full(&mut full, &split.train, &split.test, &train_cfg)?;
                cfg.levels
                    .iter()
                    .map(|&level| {
                        let mut net = space.instantiate(g, seed);
                        let stats = warm_and_measure(&mut net, split, level, cfg.k, &train_cfg)?;
                        Ok(TheoryRow {
                            width,
                            warmup_level: level,
                            cur_train_loss: stats.mean_loss(),
                            fr_norm: proxy::fr_norm(&stats),
                            mean_abs_grad: stats.mean_abs_grad(),
                            zico_term: proxy::zico_term(&stats),
                            final_train_loss: report.final_train_loss,
                            final_test_loss: report.final_test_loss,
                        })
                    })
                    .collect()
            })
            .collect::<Vec<_>>()
    });
    let mut rows = Vec::new();
    for r in per_width {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(THEORY_CSV_HEADER).unwrap();
    for r in rows {
        w.write_record([
            r.width.to_string(),
            format!("{}", r.warmup_level),
            format!("{}", r.cur_train_loss),
            format!("{}", r.fr_norm),
            format!("{}", r.mean_abs_grad),
            fmt_score(r.zico_term),
            format!("{}", r.final_train_loss),
            format!("{}", r.final_test_loss),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Spearman correlations of the early statistics with the final test loss at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryTrend {
    pub level: f64,
    pub fr_norm_vs_test: Option<f64>,
    pub mean_abs_grad_vs_test: Option<f64>,
    pub cur_loss_vs_test: Option<f64>,
    pub fr_norm_vs_train: Option<f64>,
    pub cur_loss_vs_train: Option<f64>,
}

pub fn theory_trends(rows: &[TheoryRow], levels: &[f64]) -> Vec<TheoryTrend> {
    levels
        .iter()
        .map(|&level| {
            let at: Vec<&TheoryRow> = rows.iter().filter(|r| r.warmup_level == level).collect();
            let col = |f: fn(&TheoryRow) -> f64| at.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let test = col(|r| r.final_test_loss);
            let train = col(|r| r.final_train_loss);
            TheoryTrend {
                level,
                fr_norm_vs_test: spearman_rho(&col(|r| r.fr_norm), &test),
                mean_abs_grad_vs_test: spearman_rho(&col(|r| r.mean_abs_grad), &test),
                cur_loss_vs_test: spearman_rho(&col(|r| r.cur_train_loss), &test),
                fr_norm_vs_train: spearman_rho(&col(|r| r.fr_norm), &train),
                cur_loss_vs_train: spearman_rho(&col(|r| r.cur_train_loss), &train),
            }
        })
        .collect()
}

/// Proxies reported by the correlation study, in report order.
pub const STUDY_PROXIES: [&str; 6] = ["sigeo", "zico", "grad_norm", "params", "flops", "plain"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_genotypes: usize,
    pub space: SpaceKind,
    pub max_params: usize,
    pub levels: Vec<f64>,
    pub k: usize,
    pub sgd: SgdSettings,
    /// SiGeo weights at level 0.
    pub zero_shot_weights: ProxyWeights,
    /// SiGeo weights at levels above 0.
    pub warmed_weights: ProxyWeights,
    pub options: SigeoOptions,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_genotypes: 24,
            space: SpaceKind::default_cell(),
            max_params: usize::MAX,
            levels: vec![0.0, 0.1, 0.2, 0.4],
            k: 4,
            sgd: SgdSettings::default(),
            zero_shot_weights: ProxyWeights::ZERO_SHOT,
            warmed_weights: ProxyWeights::WARMED,
            options: SigeoOptions::default(),
            seed: 0,
        }
    }
}

/// Every proxy computed from one warm-up checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub level: f64,
    /// Digest of the single `GradStats` all scores at this level came from.
    pub stats_digest: String,
    pub scores: Vec<ProxyScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub genotype_id: GenotypeId,
    pub genotype: Genotype,
    pub ground_truth: TrainReport,
    pub levels: Vec<LevelScores>,
}

impl BenchmarkRecord {
    pub fn score(&self, proxy: &str, level: f64) -> Option<&ProxyScore> {
        self.levels
            .iter()
            .find(|l| l.level == level)?
            .scores
            .iter()
            .find(|s| s.name == proxy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub proxy: String,
    pub level: f64,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub n: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationReport {
    pub fn get(&self, proxy: &str, level: f64) -> Option<&CorrelationEntry> {
        self.entries.iter().find(|e| e.proxy == proxy && e.level == level)
    }

    /// `proxy,level,spearman,kendall,n,degenerate`; undefined coefficients are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["proxy", "level", "spearman", "kendall", "n", "degenerate"])
            .unwrap();
        for e in &self.entries {
            w.write_record([
                e.proxy.clone(),
                format!("{}", e.level),
                opt(e.spearman),
                opt(e.kendall),
                e.n.to_string(),
                e.degenerate.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// All study proxies from one statistics object.
pub fn score_checkpoint(net: &crate::tensor::Network, stats: &GradStats, level: f64, cfg: &StudyConfig) -> LevelScores {
    let weights = if level > 0.0 {
        cfg.warmed_weights
    } else {
        cfg.zero_shot_weights
    };
    let mut scores = vec![proxy::sigeo_with(stats, &weights, cfg.options, level)];
    let mut zico = proxy::sigeo_with(stats, &ProxyWeights::ZICO, cfg.options, level);
    zico.name = "zico".into();
    scores.push(zico);
    scores.extend(proxy::baseline_proxies(net, stats, level));
    LevelScores {
        level,
        stats_digest: format!("{:016x}", stats.digest()),
        scores,
    }
}

/// Draws `n` distinct genotypes.
pub fn sample_distinct(space: &ArchSpace, n: usize, seed: u64) -> Result<Vec<Genotype>, HarnessError> {
    let mut r = rng::seeded(rng::derive_seed(seed, &[STREAM_SAMPLE]));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(HarnessError::BadConfig(format!("could not draw {n} distinct genotypes")));
        }
        let g = space.sample_random(&mut r)?;
        if seen.insert(g.id()) {
            out.push(g);
        }
    }
    Ok(out)
}

/// Trains one candidate to ground truth and scores it at every level.
pub fn benchmark_candidate(space: &ArchSpace, split: &DataSplit, g: &Genotype, cfg: &StudyConfig) -> Result<BenchmarkRecord, HarnessError> {
    let train_cfg = cfg.sgd.with_shuffle_seed(shuffle_seed(cfg.seed));
    let seed = init_seed(cfg.seed, g.id().0);
    let mut full = space.instantiate(g, seed);
    let ground_truth = trainer::train_full(&mut full, &split.train, &split.test, &train_cfg)?;
    let levels = cfg
        .levels
        .iter()
        .map(|&level| {
            let mut net = space.instantiate(g, seed);
            let stats = warm_and_measure(&mut net, split, level, cfg.k, &train_cfg)?;
            Ok(score_checkpoint(&net, &stats, level, cfg))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(BenchmarkRecord {
        genotype_id: g.id(),
        genotype: g.clone(),
        ground_truth,
        levels,
    })
}

/// Correlates every `(proxy, level)` score with ground-truth test accuracy.
/// Records are sorted by genotype id first, so input order does not matter.
pub fn correlate(records: &[BenchmarkRecord], proxies: &[&str], levels: &[f64]) -> CorrelationReport {
    let mut sorted: Vec<&BenchmarkRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.genotype_id);
    let truth: Vec<f64> = sorted.iter().map(|r| r.ground_truth.test_accuracy).collect();
    let mut entries = Vec::new();
    for &proxy in proxies {
        for &level in levels {
            let scores: Vec<f64> = sorted
                .iter()
                .map(|r| r.score(proxy, level).map_or(f64::NEG_INFINITY, |s| s.value))
                .collect();
            entries.push(CorrelationEntry {
                proxy: proxy.to_string(),
                level,
                spearman: spearman_rho(&scores, &truth),
                kendall: kendall_tau(&scores, &truth),
                n: scores.len(),
                degenerate: scores.iter().filter(|v| **v == f64::NEG_INFINITY).count(),
            });
        }
    }
    CorrelationReport { entries }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub report: CorrelationReport,
    pub records: Vec<BenchmarkRecord>,
    /// Candidates whose evaluation failed, with the error message.
    pub failures: Vec<(GenotypeId, String)>,
}

pub fn run_correlation_study(split: &DataSplit, cfg: &StudyConfig, workers: usize) -> Result<StudyOutput, HarnessError> {
    check_levels(&cfg.levels)?;
    if cfg.n_genotypes < 3 {
        return Err(HarnessError::BadConfig("need at least 3 genotypes".into()));
    }
    if cfg.k < 2 {
        return Err(ProxyError::TooFewBatches(cfg.k).into());
    }
    cfg.sgd.with_shuffle_seed(0).validate()?;
    let space = ArchSpace::new(cfg.space.clone(), split.task(), ResourceConstraint::new(cfg.max_params)?)?;
    let genotypes = sample_distinct(&space, cfg.n_genotypes, cfg.seed)?;
    let results: Vec<Result<BenchmarkRecord, HarnessError>> = pool(workers)?.install(|| {
        genotypes
            .par_iter()
            .map(|g| benchmark_candidate(&space, split, g, cfg))
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (g, r) in genotypes.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((g.id(), e.to_string())),
        }
    }
    records.sort_by_key(|r| r.genotype_id);
    failures.sort();
    let report = correlate(&records, &STUDY_PROXIES, &cfg.levels);
    Ok(StudyOutput {
        report,
        records,
        failures,
    })
}
