//! Versioned JSON run configurations and the manifests written next to every
//! run's outputs. A manifest is the effective configuration plus a
//! `provenance` block, so it can be passed back as `--config` to reproduce
//! the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sigeo_core::data::DATA_DIR_ENV;
use sigeo_core::harness::{SgdSettings, StudyConfig, TheoryConfig};
use sigeo_core::proxy::SigeoOptions;
use sigeo_core::{DatasetConfig, Genotype, ProxyWeights, SpaceKind};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Field default for `version`, so a file without one is rejected rather than
/// silently taking the struct default.
fn missing_version() -> u32 {
    0
}

/// Where a manifest came from. Ignored on input apart from the command check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Every seed the run derived from its configuration.
    pub seeds: BTreeMap<String, u64>,
}

impl Provenance {
    pub fn new(command: &str, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            tool: "sigeo".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seeds,
        }
    }
}

/// Fields shared by every run configuration.
pub trait RunConfig: Serialize + DeserializeOwned + Default {
    const COMMAND: &'static str;

    fn version(&self) -> u32;
    fn dataset_mut(&mut self) -> &mut DatasetConfig;
    fn out_dir_mut(&mut self) -> &mut Option<PathBuf>;
    fn provenance_mut(&mut self) -> &mut Option<Provenance>;
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! run_config {
    ($ty:ty, $cmd:literal, $($seed:ident).+) => {
        impl RunConfig for $ty {
            const COMMAND: &'static str = $cmd;

            fn version(&self) -> u32 {
                self.version
            }

            fn dataset_mut(&mut self) -> &mut DatasetConfig {
                &mut self.dataset
            }

            fn out_dir_mut(&mut self) -> &mut Option<PathBuf> {
                &mut self.out_dir
            }

            fn provenance_mut(&mut self) -> &mut Option<Provenance> {
                &mut self.provenance
            }

            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.$($seed).+
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryRun {
    #[serde(default = "missing_version")]
    pub version: u32,
    pub dataset: DatasetConfig,
    pub theory: TheoryConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for TheoryRun {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            theory: TheoryConfig::default(),
            out_dir: None,
            provenance: None,
        }
    }
}

run_config!(TheoryRun, "validate-theory", theory.seed);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateRun {
    #[serde(default = "missing_version")]
    pub version: u32,
    pub dataset: DatasetConfig,
    pub study: StudyConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for CorrelateRun {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            study: StudyConfig::default(),
            out_dir: None,
            provenance: None,
        }
    }
}

run_config!(CorrelateRun, "correlate", study.seed);

/// Warm-up and scoring settings of a single candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    pub warmup_fraction: f64,
    pub k: usize,
    pub weights: ProxyWeights,
    pub options: SigeoOptions,
    pub sgd: SgdSettings,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.1,
            k: 4,
            weights: ProxyWeights::WARMED,
            options: SigeoOptions::default(),
            sgd: SgdSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Warm up each candidate and score it with the configured weights.
    #[default]
    Sigeo,
    /// Negative parameter count; needs no data passes (smoke tests, oracles).
    NegParamCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionSettings {
    pub population_size: usize,
    pub iterations: usize,
    pub tournament_size: usize,
    pub children_per_iter: usize,
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        Self {
            population_size: 16,
            iterations: 60,
            tournament_size: 8,
            children_per_iter: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchRun {
    #[serde(default = "missing_version")]
    pub version: u32,
    pub dataset: DatasetConfig,
    pub space: SpaceKind,
    /// Parameter budget; `null` means unbounded.
    pub max_params: Option<usize>,
    pub objective: Objective,
    pub evolution: EvolutionSettings,
    pub protocol: ProtocolSettings,
    pub train_best: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for SearchRun {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            space: SpaceKind::default_cell(),
            max_params: None,
            objective: Objective::default(),
            evolution: EvolutionSettings::default(),
            protocol: ProtocolSettings::default(),
            train_best: false,
            seed: 0,
            out_dir: None,
            provenance: None,
        }
    }
}

run_config!(SearchRun, "search", seed);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreRun {
    #[serde(default = "missing_version")]
    pub version: u32,
    pub dataset: DatasetConfig,
    pub genotype: Option<Genotype>,
    pub protocol: ProtocolSettings,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Default for ScoreRun {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            genotype: None,
            protocol: ProtocolSettings::default(),
            seed: 0,
            out_dir: None,
            provenance: None,
        }
    }
}

run_config!(ScoreRun, "score", seed);

/// Reads a config (or manifest) file; `None` gives the defaults.
pub fn load<C: RunConfig>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg: C = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.version() == 0 {
        return Err(CliError::Config(format!("{}: missing `version` (current is {CONFIG_VERSION})", path.display())));
    }
    if cfg.version() != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "{}: config version {} is not supported (expected {CONFIG_VERSION})",
            path.display(),
            cfg.version()
        )));
    }
    if let Some(p) = cfg.provenance_mut().take() {
        if p.command != C::COMMAND {
            return Err(CliError::Config(format!(
                "{}: manifest was written by `{}`, not `{}`",
                path.display(),
                p.command,
                C::COMMAND
            )));
        }
    }
    Ok(cfg)
}

/// Pins the IDX directory to a concrete path (flag, then config, then
/// `SIGEO_DATA_DIR`) so the manifest does not depend on the environment.
pub fn resolve_data_dir(dataset: &mut DatasetConfig, flag: Option<PathBuf>) -> Result<(), CliError> {
    if !matches!(dataset, DatasetConfig::Idx { .. }) && flag.is_some() {
        return Err(CliError::Config("--data-dir only applies to IDX datasets".into()));
    }
    if let DatasetConfig::Idx { dir, .. } = dataset {
        if let Some(d) = flag {
            *dir = Some(d);
        }
        if dir.is_none() {
            *dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        }
        if dir.is_none() {
            return Err(CliError::Config(format!(
                "IDX dataset needs `dir` in the config, --data-dir, or {DATA_DIR_ENV}"
            )));
        }
    }
    Ok(())
}

pub fn to_pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}
