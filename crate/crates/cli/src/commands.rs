use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sigeo_core::arch::Architecture;
use sigeo_core::evolution::candidate_init_seed;
use sigeo_core::harness::{self, run_correlation_study, run_theory_validation, theory_csv, theory_trends};
use sigeo_core::{
    rng, score_candidate, trainer, ArchSpace, DataSplit, DatasetConfig, EvoConfig, Genotype, ProxyScore, ProxyWeights,
    ResourceConstraint, ScoreProtocol, SpaceKind,
};

use crate::config::{
    self, to_pretty_json, CorrelateRun, Objective, ProtocolSettings, Provenance, RunConfig, ScoreRun, SearchRun,
    TheoryRun,
};
use crate::error::CliError;

pub const DEFAULT_OUT_DIR: &str = "sigeo-out";
pub const MANIFEST_FILE: &str = "manifest.json";

const STREAM_EVOLUTION: u64 = 0x4556_4f4c;
const STREAM_CANDIDATE: u64 = 0x4341_4e44;

/// Options every subcommand accepts. Flags take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub print_config: bool,
}

/// Loads the config, applies the shared flag overrides and pins the data directory.
fn prepare<C: RunConfig>(common: &Common) -> Result<C, CliError> {
    let mut cfg: C = config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        *cfg.seed_mut() = seed;
    }
    if let Some(out) = &common.out_dir {
        *cfg.out_dir_mut() = Some(out.clone());
    }
    config::resolve_data_dir(cfg.dataset_mut(), common.data_dir.clone())?;
    Ok(cfg)
}

fn out_dir<C: RunConfig>(cfg: &mut C) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir_mut().clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

/// Writes the effective config, minus the output directory, plus provenance.
fn write_manifest<C: RunConfig + Clone>(dir: &Path, cfg: &C, seeds: BTreeMap<String, u64>) -> Result<(), CliError> {
    let mut manifest = cfg.clone();
    *manifest.out_dir_mut() = None;
    *manifest.provenance_mut() = Some(Provenance::new(C::COMMAND, seeds));
    write(dir, MANIFEST_FILE, &to_pretty_json(&manifest))
}

fn dataset_seeds(dataset: &DatasetConfig, seeds: &mut BTreeMap<String, u64>) {
    if let DatasetConfig::Synthetic { seed, .. } = dataset {
        seeds.insert("dataset.train".into(), *seed);
        seeds.insert("dataset.test".into(), rng::derive_seed(*seed, &[1]));
    }
}

fn print_config<C: RunConfig>(cfg: &C) {
    print!("{}", to_pretty_json(cfg));
}

pub fn validate_theory(common: &Common) -> Result<(), CliError> {
    let mut cfg: TheoryRun = prepare(common)?;
    if common.print_config {
        print_config(&cfg);
        return Ok(());
    }
    let dir = out_dir(&mut cfg)?;
    let split = cfg.dataset.load()?;
    let rows = run_theory_validation(&split, &cfg.theory, common.workers)?;
    write(&dir, "theory_validation.csv", &theory_csv(&rows))?;
    write(&dir, "theory_trends.json", &to_pretty_json(&theory_trends(&rows, &cfg.theory.levels)))?;

    let seed = cfg.theory.seed;
    let mut seeds = BTreeMap::from([
        ("seed".to_string(), seed),
        ("shuffle".to_string(), harness::shuffle_seed(seed)),
    ]);
    for &w in &cfg.theory.widths {
        seeds.insert(format!("init.width{w:02}"), harness::init_seed(seed, w as u64));
    }
    dataset_seeds(&cfg.dataset, &mut seeds);
    write_manifest(&dir, &cfg, seeds)
}

pub fn correlate(common: &Common) -> Result<(), CliError> {
    let mut cfg: CorrelateRun = prepare(common)?;
    if common.print_config {
        print_config(&cfg);
        return Ok(());
    }
    let dir = out_dir(&mut cfg)?;
    let split = cfg.dataset.load()?;
    let out = run_correlation_study(&split, &cfg.study, common.workers)?;
    for (id, msg) in &out.failures {
        eprintln!("warning: candidate {id} failed: {msg}");
    }
    write(&dir, "correlation_report.csv", &out.report.to_csv())?;
    write(&dir, "records.json", &to_pretty_json(&out.records))?;
    if !out.failures.is_empty() {
        write(&dir, "failures.json", &to_pretty_json(&out.failures))?;
    }

    let seed = cfg.study.seed;
    let mut seeds = BTreeMap::from([
        ("seed".to_string(), seed),
        ("shuffle".to_string(), harness::shuffle_seed(seed)),
    ]);
    for r in &out.records {
        seeds.insert(format!("init.{}", r.genotype_id), harness::init_seed(seed, r.genotype_id.0));
    }
    dataset_seeds(&cfg.dataset, &mut seeds);
    write_manifest(&dir, &cfg, seeds)
}

fn score_protocol(p: &ProtocolSettings, seed: u64) -> ScoreProtocol {
    ScoreProtocol {
        warmup_fraction: p.warmup_fraction,
        k: p.k,
        weights: p.weights,
        options: p.options,
        train: p.sgd.with_shuffle_seed(harness::shuffle_seed(seed)),
        seed: rng::derive_seed(seed, &[STREAM_CANDIDATE]),
    }
}

fn check_protocol(p: &ProtocolSettings) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&p.warmup_fraction) {
        return Err(CliError::Config(format!(
            "warmup_fraction {} outside [0, 1]",
            p.warmup_fraction
        )));
    }
    if p.k < 2 {
        return Err(CliError::Config(format!("protocol needs k >= 2, got {}", p.k)));
    }
    p.sgd.with_shuffle_seed(0).validate()?;
    Ok(())
}

/// Extra flags of `search`.
#[derive(Debug, Clone, Default)]
pub struct SearchFlags {
    pub train_best: bool,
    pub iterations: Option<usize>,
    pub weights: Option<ProxyWeights>,
}

pub fn search(common: &Common, flags: &SearchFlags) -> Result<(), CliError> {
    let mut cfg: SearchRun = prepare(common)?;
    if flags.train_best {
        cfg.train_best = true;
    }
    if let Some(it) = flags.iterations {
        cfg.evolution.iterations = it;
    }
    if let Some(w) = flags.weights {
        cfg.protocol.weights = w;
    }
    if common.print_config {
        print_config(&cfg);
        return Ok(());
    }
    check_protocol(&cfg.protocol)?;
    let constraint = match cfg.max_params {
        Some(m) => ResourceConstraint::new(m)?,
        None => ResourceConstraint::unbounded(),
    };
    let evo_seed = rng::derive_seed(cfg.seed, &[STREAM_EVOLUTION]);
    let evo = EvoConfig {
        population_size: cfg.evolution.population_size,
        iterations: cfg.evolution.iterations,
        tournament_size: cfg.evolution.tournament_size,
        children_per_iter: cfg.evolution.children_per_iter,
        constraint,
        seed: evo_seed,
    };
    evo.validate()?;
    let dir = out_dir(&mut cfg)?;
    let split = cfg.dataset.load()?;
    let space = ArchSpace::new(cfg.space.clone(), split.task(), constraint)?;
    let protocol = score_protocol(&cfg.protocol, cfg.seed);

    let history = match cfg.objective {
        Objective::NegParamCount => {
            sigeo_core::regularized_evolution(&space, |g| -(space.param_count(g) as f64), &evo, common.workers)?
        }
        Objective::Sigeo => sigeo_core::regularized_evolution(
            &space,
            |g| {
                score_candidate(&space, &split.train, g, &protocol)
                    .map(|s| s.value)
                    .unwrap_or(f64::NEG_INFINITY)
            },
            &evo,
            common.workers,
        )?,
    };
    write(&dir, "evo_history.csv", &history.to_csv())?;
    write(&dir, "evo_history.json", &to_pretty_json(&history))?;
    write(&dir, "best_genotype.json", &to_pretty_json(&history.best.genotype))?;
    if cfg.train_best {
        let report = train_candidate(&space, &split, &history.best.genotype, &protocol)?;
        write(&dir, "best_train_report.json", &to_pretty_json(&report))?;
        write(&dir, "best_loss_curve.csv", &report.curve_csv())?;
    }

    let mut seeds = BTreeMap::from([
        ("seed".to_string(), cfg.seed),
        ("evolution".to_string(), evo_seed),
        ("shuffle".to_string(), protocol.train.shuffle_seed),
        ("candidate_base".to_string(), protocol.seed),
    ]);
    dataset_seeds(&cfg.dataset, &mut seeds);
    write_manifest(&dir, &cfg, seeds)
}

fn train_candidate(
    space: &ArchSpace,
    split: &DataSplit,
    g: &Genotype,
    protocol: &ScoreProtocol,
) -> Result<sigeo_core::TrainReport, CliError> {
    let mut net = space.instantiate(g, candidate_init_seed(protocol.seed, g));
    Ok(trainer::train_full(&mut net, &split.train, &split.test, &protocol.train)?)
}

/// Extra flags of `score`.
#[derive(Debug, Clone, Default)]
pub struct ScoreFlags {
    pub genotype: Option<PathBuf>,
    pub weights: Option<ProxyWeights>,
    pub warmup_fraction: Option<f64>,
}

/// The smallest space that holds `g`, so scoring needs no space in the config.
fn space_for(g: &Genotype, split: &DataSplit) -> Result<ArchSpace, CliError> {
    let kind = match g.arch() {
        Architecture::Mlp { widths } => SpaceKind::Mlp {
            min_depth: widths.len(),
            max_depth: widths.len(),
        },
        Architecture::Cell { ops, stem_width } => SpaceKind::Cell {
            num_nodes: ops.len(),
            stem_widths: vec![*stem_width],
        },
    };
    Ok(ArchSpace::new(kind, split.task(), ResourceConstraint::unbounded())?)
}

/// Returns `None` when only the config was printed.
pub fn score(common: &Common, flags: &ScoreFlags) -> Result<Option<ProxyScore>, CliError> {
    let mut cfg: ScoreRun = prepare(common)?;
    if let Some(path) = &flags.genotype {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        cfg.genotype = Some(Genotype::from_json(text.trim()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?);
    }
    if let Some(w) = flags.weights {
        cfg.protocol.weights = w;
    }
    if let Some(f) = flags.warmup_fraction {
        cfg.protocol.warmup_fraction = f;
    }
    if common.print_config {
        print_config(&cfg);
        return Ok(None);
    }
    check_protocol(&cfg.protocol)?;
    let Some(genotype) = cfg.genotype.clone() else {
        return Err(CliError::Config("no genotype: pass --genotype or set `genotype` in the config".into()));
    };
    let dir = out_dir(&mut cfg)?;
    let split = cfg.dataset.load()?;
    let space = space_for(&genotype, &split)?;
    let protocol = score_protocol(&cfg.protocol, cfg.seed);
    let result = score_candidate(&space, &split.train, &genotype, &protocol)?;
    write(&dir, "score.json", &to_pretty_json(&result))?;

    let mut seeds = BTreeMap::from([
        ("seed".to_string(), cfg.seed),
        ("shuffle".to_string(), protocol.train.shuffle_seed),
        ("init".to_string(), candidate_init_seed(protocol.seed, &genotype)),
    ]);
    dataset_seeds(&cfg.dataset, &mut seeds);
    write_manifest(&dir, &cfg, seeds)?;
    Ok(Some(result))
}
