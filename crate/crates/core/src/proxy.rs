//! Gradient statistics over `k` proxy batches and the scores built on them.
//!
//! The combined score is
//!
//! ```text
//! score = λ1 · Σ_m log ‖μ_m ⊘ σ_m‖₁  +  λ2 · log(θᵀF̂θ)  −  λ3 · loss
//! ```
//!
//! where `μ_m` and `σ_m` are the per-parameter mean absolute gradient and
//! population standard deviation across the `k` batches, restricted to module
//! `m`, and `θᵀF̂θ = (1/k) Σ_i (θ·∇ℓ_i)²` is the empirical Fisher quadratic form
//! evaluated without materializing the matrix. With `λ2 = λ3 = 0` the score is
//! exactly the ZiCo statistic.
//!
//! Every score is oriented so that larger means "predicted better".

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Batch, Network, ParamModule, TensorError};

/// Parameters whose gradient std is at or below this are left out of `μ/σ`.
pub const SIGMA_EPS: f64 = 1e-12;
/// Floor applied to the Fisher quadratic form before taking its log.
pub const FR_EPS: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxyError {
    #[error("gradient statistics need k >= 2 batches, got {0}")]
    TooFewBatches(usize),
    #[error("proxy weights must be non-negative and not all zero: {0:?}")]
    BadWeights([f64; 3]),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-parameter running sums over the proxy batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub k: usize,
    pub abs_sum: Vec<f64>,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
    /// `θ·∇ℓ(θ; D_i)` per batch, with θ the (fixed) current parameters.
    pub theta_dot_g: Vec<f64>,
    pub losses: Vec<f64>,
    /// `‖∇ℓ(θ; D_i)‖₂` per batch.
    pub grad_norms: Vec<f64>,
    pub module_index: Vec<ParamModule>,
}

impl GradStats {
    pub fn mu(&self, j: usize) -> f64 {
        self.abs_sum[j] / self.k as f64
    }

    /// Population standard deviation (divides by `k`), clamped at 0.
    pub fn sigma(&self, j: usize) -> f64 {
        let k = self.k as f64;
        let m = self.sum[j] / k;
        (self.sumsq[j] / k - m * m).max(0.0).sqrt()
    }

    /// `‖μ‖₁` over all parameters.
    pub fn mean_abs_grad(&self) -> f64 {
        (0..self.abs_sum.len()).map(|j| self.mu(j)).sum()
    }

    pub fn mean_loss(&self) -> f64 {
        crate::sum::exact_sum(self.losses.iter().copied()) / self.k as f64
    }

    /// Multiplies every stored gradient by `c` (θ unchanged).
    pub fn scale_gradients(&mut self, c: f64) {
        for v in &mut self.abs_sum {
            *v *= c.abs();
        }
        for v in &mut self.sum {
            *v *= c;
        }
        for v in &mut self.sumsq {
            *v *= c * c;
        }
        for v in &mut self.theta_dot_g {
            *v *= c;
        }
        for v in &mut self.grad_norms {
            *v *= c.abs();
        }
    }

    /// FNV-1a digest of every field; equal digests mean the same statistics.
    pub fn digest(&self) -> u64 {
        let mut h = crate::arch::Fnv1a::new();
        h.write(&(self.k as u64).to_le_bytes());
        for v in self
            .abs_sum
            .iter()
            .chain(&self.sum)
            .chain(&self.sumsq)
            .chain(&self.theta_dot_g)
            .chain(&self.losses)
            .chain(&self.grad_norms)
        {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// One backward pass per batch at fixed parameters, accumulated in batch order.
pub fn accumulate_grad_stats(net: &Network, batches: &[Batch]) -> Result<GradStats, ProxyError> {
    let k = batches.len();
    if k < 2 {
        return Err(ProxyError::TooFewBatches(k));
    }
    let p = net.param_count();
    let mut stats = GradStats {
        k,
        abs_sum: vec![0.0; p],
        sum: vec![0.0; p],
        sumsq: vec![0.0; p],
        theta_dot_g: Vec::with_capacity(k),
        losses: Vec::with_capacity(k),
        grad_norms: Vec::with_capacity(k),
        module_index: net.module_index().to_vec(),
    };
    for batch in batches {
        let g = net.backward(batch)?;
        for (j, &gj) in g.grads.iter().enumerate() {
            stats.abs_sum[j] += gj.abs();
            stats.sum[j] += gj;
            stats.sumsq[j] += gj * gj;
        }
        let dot: f64 = net.params.iter().zip(&g.grads).map(|(t, g)| t * g).sum();
        stats.theta_dot_g.push(dot);
        stats.grad_norms.push(g.l2_norm());
        stats.losses.push(g.loss);
    }
    Ok(stats)
}

/// How parameters are grouped for the `log ‖μ ⊘ σ‖₁` term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One log term per parameterized module.
    #[default]
    Module,
    /// A single log term over all parameters.
    Whole,
}

/// Which loss enters the `λ3` term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    /// Mean over the `k` proxy batches.
    #[default]
    Mean,
    /// Loss of the last proxy batch only.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZicoTerm {
    /// `Σ_m log S_m`, or `-inf` when every group was skipped.
    pub value: f64,
    pub skipped_modules: usize,
}

pub fn zico_term_with(stats: &GradStats, grouping: Grouping) -> ZicoTerm {
    let ratio_sum = |range: std::ops::Range<usize>| -> f64 {
        range
            .filter_map(|j| {
                let s = stats.sigma(j);
                (s > SIGMA_EPS).then(|| stats.mu(j) / s)
            })
            .sum()
    };
    let groups: Vec<f64> = match grouping {
        Grouping::Module => stats
            .module_index
            .iter()
            .map(|m| ratio_sum(m.range.clone()))
            .collect(),
        Grouping::Whole => vec![ratio_sum(0..stats.abs_sum.len())],
    };
    let mut value = 0.0;
    let mut skipped = 0;
    let mut used = 0;
    for s in &groups {
        if *s > 0.0 {
            value += s.ln();
            used += 1;
        } else {
            skipped += 1;
        }
    }
    ZicoTerm {
        value: if used == 0 { f64::NEG_INFINITY } else { value },
        skipped_modules: skipped,
    }
}

/// `Σ_m log ‖μ_m ⊘ σ_m‖₁` with module grouping.
pub fn zico_term(stats: &GradStats) -> f64 {
    zico_term_with(stats, Grouping::Module).value
}

/// `(1/k) Σ_i (θ·∇ℓ_i)²`.
pub fn fr_norm(stats: &GradStats) -> f64 {
    stats.theta_dot_g.iter().map(|v| v * v).sum::<f64>() / stats.k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct ProxyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl ProxyWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self, ProxyError> {
        let w = [lambda1, lambda2, lambda3];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(ProxyError::BadWeights(w));
        }
        Ok(Self {
            lambda1,
            lambda2,
            lambda3,
        })
    }

    /// `(1, 0, 0)`: the ZiCo statistic.
    pub const ZICO: Self = Self {
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    /// `(1, 1, 0)`: no warm-up.
    pub const ZERO_SHOT: Self = Self {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 0.0,
    };
    /// `(1, 1, 1)`: warmed-up candidates in small spaces.
    pub const WARMED: Self = Self {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 1.0,
    };
    /// `(1, 50, 1)`: warmed-up convolutional spaces.
    pub const WARMED_CV: Self = Self {
        lambda1: 1.0,
        lambda2: 50.0,
        lambda3: 1.0,
    };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "zico" => Some(Self::ZICO),
            "zero_shot" => Some(Self::ZERO_SHOT),
            "warmed" => Some(Self::WARMED),
            "warmed_cv" => Some(Self::WARMED_CV),
            _ => None,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }
}

impl TryFrom<[f64; 3]> for ProxyWeights {
    type Error = ProxyError;

    fn try_from(w: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(w[0], w[1], w[2])
    }
}

impl From<ProxyWeights> for [f64; 3] {
    fn from(w: ProxyWeights) -> Self {
        w.as_array()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigeoOptions {
    #[serde(default)]
    pub grouping: Grouping,
    #[serde(default)]
    pub loss_term: LossTerm,
}

/// A named score. `value == -inf` is the degenerate sentinel and serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub name: String,
    #[serde(with = "sentinel")]
    pub value: f64,
    #[serde(rename = "lambda", with = "weights_or_null")]
    pub weights: Option<ProxyWeights>,
    pub k: usize,
    pub warmup_fraction: f64,
}

impl ProxyScore {
    pub fn is_degenerate(&self) -> bool {
        self.value == f64::NEG_INFINITY
    }
}

mod sentinel {
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

mod weights_or_null {
    use super::ProxyWeights;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(w: &Option<ProxyWeights>, s: S) -> Result<S::Ok, S::Error> {
        w.map(|w| w.as_array()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ProxyWeights>, D::Error> {
        Option::<[f64; 3]>::deserialize(d)?
            .map(|w| ProxyWeights::try_from(w).map_err(serde::de::Error::custom))
            .transpose()
    }
}

pub fn sigeo_value(stats: &GradStats, w: &ProxyWeights, opts: SigeoOptions) -> f64 {
    let zico = zico_term_with(stats, opts.grouping).value;
    let mut value = w.lambda1 * zico;
    if w.lambda1 == 0.0 {
        // 0 * -inf would be NaN; a zero weight drops the term entirely.
        value = 0.0;
    } else if zico == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if w.lambda2 != 0.0 {
        value += w.lambda2 * fr_norm(stats).max(FR_EPS).ln();
    }
    if w.lambda3 != 0.0 {
        let loss = match opts.loss_term {
            LossTerm::Mean => stats.mean_loss(),
            LossTerm::Last => *stats.losses.last().expect("k >= 2"),
        };
        value -= w.lambda3 * loss;
    }
    value
}

pub fn sigeo(stats: &GradStats, w: &ProxyWeights) -> ProxyScore {
    sigeo_with(stats, w, SigeoOptions::default(), 0.0)
}

pub fn sigeo_with(stats: &GradStats, w: &ProxyWeights, opts: SigeoOptions, warmup_fraction: f64) -> ProxyScore {
    ProxyScore {
        name: "sigeo".into(),
        value: sigeo_value(stats, w, opts),
        weights: Some(*w),
        k: stats.k,
        warmup_fraction,
    }
}

/// Cheap reference scores: `grad_norm` (mean per-batch gradient L2 norm),
/// `params`, `flops`, and `plain` (negated mean proxy loss).
pub fn baseline_proxies(net: &Network, stats: &GradStats, warmup_fraction: f64) -> Vec<ProxyScore> {
    let mk = |name: &str, value: f64| ProxyScore {
        name: name.into(),
        value,
        weights: None,
        k: stats.k,
        warmup_fraction,
    };
    vec![
        mk("grad_norm", stats.grad_norms.iter().sum::<f64>() / stats.k as f64),
        mk("params", net.param_count() as f64),
        mk("flops", net.flop_count() as f64),
        mk("plain", -stats.mean_loss()),
    ]
}
