//! Training-free and lightly-warmed-up architecture scoring.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`tensor`]: a closed-set forward/backward engine (linear, ReLU, node sums,
//!   softmax cross-entropy) with a finite-difference oracle.
//! - [`arch`]: MLP and cell search spaces with sampling, mutation and
//!   instantiation under a parameter budget.
//! - [`data`]: IDX files, Gaussian-cluster data, normalization and seeded batch streams.
//! - [`trainer`]: SGD, warm-up and full training runs.
//! - [`proxy`]: gradient statistics over `k` batches and the scores built on them.
//! - [`evolution`]: aging evolution and the warm-up-then-score objective.
//! - [`corr`] and [`harness`]: rank correlations and the experiment drivers.
//!
//! Everything is `f64` and deterministic given the seeds.

pub mod arch;
pub mod corr;
pub mod data;
pub mod evolution;
pub mod harness;
pub mod proxy;
pub mod rng;
pub mod sum;
pub mod tensor;
pub mod trainer;

pub use arch::{ArchSpace, CellOp, Genotype, GenotypeId, ResourceConstraint, SpaceKind, TaskShape};
pub use data::{BatchStream, DataSplit, Dataset, DatasetConfig};
pub use evolution::{regularized_evolution, score_candidate, EvoConfig, EvoHistory, ScoreProtocol};
pub use harness::{BenchmarkRecord, CorrelationReport, StudyConfig, TheoryConfig};
pub use proxy::{GradStats, ProxyScore, ProxyWeights};
pub use tensor::{Batch, GradBuffer, Network, Tensor};
pub use trainer::{TrainConfig, TrainReport};
