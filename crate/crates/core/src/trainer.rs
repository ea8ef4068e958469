//! Plain SGD (`θ ← θ − η ∇ℓ`), the warm-up controller and full training runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchStream, DataError, Dataset};
use crate::sum::exact_sum;
use crate::tensor::{Batch, Network, TensorError};

/// Evaluation runs through the data in chunks of this many samples.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite gradient; step skipped")]
    NonFiniteGradient,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η_t = η · (1 + cos(π t / T)) / 2` over the `T` steps of the full run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 128,
            epochs: 3,
            shuffle_seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Step size for global step `t` of a run with `total` steps.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub test_accuracy: f64,
    pub loss_curve: Vec<EpochLoss>,
    pub steps: usize,
    pub diverged: bool,
}

impl TrainReport {
    /// `epoch,train_loss,test_loss` rows.
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "test_loss"]).unwrap();
        for e in &self.loss_curve {
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.train_loss),
                format!("{}", e.test_loss),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// In-place update `params -= eta * grads`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], eta: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= eta * g;
    }
}

/// One SGD step on `batch`. Returns the pre-step batch loss. Nothing is
/// updated if any gradient is non-finite.
pub fn sgd_step(net: &mut Network, batch: &Batch, eta: f64) -> Result<f64, TrainError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(TrainError::BadLearningRate(eta));
    }
    let g = net.backward(batch)?;
    if g.grads.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    sgd_update(&mut net.params, &g.grads, eta);
    Ok(g.loss)
}

/// Steps implied by a warm-up fraction: `floor(fraction * N / batch_size)`.
pub fn warmup_steps(fraction: f64, n: usize, batch_size: usize) -> usize {
    // The 1e-9 slack keeps e.g. 0.29 * 100 from flooring to 28.
    let samples = (fraction * n as f64 + 1e-9).floor() as usize;
    samples / batch_size
}

/// Trains on the first `warmup_steps(..)` batches of the run's batch stream.
/// Those are the same batches a full run with this config starts with.
pub fn warmup(net: &mut Network, ds: &Dataset, fraction: f64, cfg: &TrainConfig) -> Result<usize, TrainError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TrainError::BadConfig(format!("warm-up fraction {fraction} outside [0, 1]")));
    }
    cfg.validate()?;
    let steps = warmup_steps(fraction, ds.len(), cfg.batch_size);
    if steps == 0 {
        return Ok(0);
    }
    let mut stream = BatchStream::new(ds, cfg.batch_size, cfg.shuffle_seed)?;
    let total = cfg.epochs.max(1) * stream.batches_per_epoch();
    for t in 0..steps {
        let batch = stream.batch_at(t);
        sgd_step(net, &batch, cfg.lr_at(t, total))?;
    }
    Ok(steps)
}

/// Mean loss and argmax accuracy over the dataset. Does not touch parameters.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, f64), TrainError> {
    let mut losses = Vec::with_capacity(ds.len());
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = ds.batch(chunk);
        let (l, preds) = net.predict(&batch)?;
        losses.extend(l);
        correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    let loss = exact_sum(losses.iter().copied()) / ds.len() as f64;
    Ok((loss, correct as f64 / ds.len() as f64))
}

/// Epoch loop with a fresh seeded shuffle per epoch. On divergence the run
/// stops, `diverged` is set and metrics come from the last finite parameters
/// (infinite losses and zero accuracy if even those cannot be evaluated).
pub fn train_full(net: &mut Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(TrainError::BadConfig("epochs must be >= 1 for a full run".into()));
    }
    let mut stream = BatchStream::new(train, cfg.batch_size, cfg.shuffle_seed)?;
    let per_epoch = stream.batches_per_epoch();
    let total = cfg.epochs * per_epoch;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut diverged = false;
    'epochs: for epoch in 0..cfg.epochs {
        for b in 0..per_epoch {
            let t = epoch * per_epoch + b;
            let batch = stream.batch_at(t);
            match sgd_step(net, &batch, cfg.lr_at(t, total)) {
                Ok(_) => steps += 1,
                Err(TrainError::NonFiniteGradient) | Err(TrainError::Tensor(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        match (evaluate(net, train), evaluate(net, test)) {
            (Ok((tr, _)), Ok((te, _))) if tr.is_finite() && te.is_finite() => loss_curve.push(EpochLoss {
                epoch,
                train_loss: tr,
                test_loss: te,
            }),
            _ => {
                diverged = true;
                break 'epochs;
            }
        }
    }
    let (final_train_loss, final_test_loss, test_accuracy) =
        match (evaluate(net, train), evaluate(net, test)) {
            (Ok((tr, _)), Ok((te, acc))) if tr.is_finite() && te.is_finite() => (tr, te, acc),
            _ => (f64::INFINITY, f64::INFINITY, 0.0),
        };
    Ok(TrainReport {
        final_train_loss,
        final_test_loss,
        test_accuracy,
        loss_curve,
        steps,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian;
    use crate::tensor::{mlp, Tensor};

    fn separable() -> (Dataset, Dataset) {
        (
            synth_gaussian(200, 4, 2, 10.0, 1).unwrap(),
            synth_gaussian(100, 4, 2, 10.0, 2).unwrap(),
        )
    }

    #[test]
    fn quadratic_surrogate_step() {
        // loss θ²/2 has gradient θ
        let mut theta = vec![1.0];
        let g = theta.clone();
        sgd_update(&mut theta, &g, 0.1);
        assert_eq!(theta, vec![0.9]);
    }

    #[test]
    fn step_rejects_bad_rate_and_is_deterministic() {
        let (train, _) = separable();
        let batch = train.batch(&[0, 1, 250, 399]);
        let mut a = mlp(4, &[3], 2, 5);
        let mut b = mlp(4, &[3], 2, 5);
        let before = a.param_digest();
        assert!(matches!(sgd_step(&mut a, &batch, 0.0), Err(TrainError::BadLearningRate(_))));
        assert_eq!(a.param_digest(), before);
        sgd_step(&mut a, &batch, 0.05).unwrap();
        sgd_step(&mut b, &batch, 0.05).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.param_digest(), before);
    }

    #[test]
    fn non_finite_gradient_leaves_params_untouched() {
        let mut net = mlp(1, &[], 2, 0);
        net.params = vec![1e200, -1e200, 0.0, 0.0];
        let batch = Batch::new(Tensor::new(vec![1, 1], vec![1e200]).unwrap(), vec![0]).unwrap();
        let before = net.params.clone();
        assert!(sgd_step(&mut net, &batch, 0.1).is_err());
        assert_eq!(net.params, before);
    }

    #[test]
    fn warmup_step_counts() {
        assert_eq!(warmup_steps(0.01, 60_000, 128), 4);
        assert_eq!(warmup_steps(0.0, 60_000, 128), 0);
        assert_eq!(warmup_steps(0.29, 100, 1), 29);
        assert_eq!(warmup_steps(1.0, 1000, 128), 7);
    }

    #[test]
    fn warmup_fraction_zero_and_determinism() {
        let (train, _) = separable();
        let cfg = TrainConfig { batch_size: 16, ..TrainConfig::default() };
        let mut net = mlp(4, &[8], 2, 3);
        let before = net.clone();
        assert_eq!(warmup(&mut net, &train, 0.0, &cfg).unwrap(), 0);
        assert_eq!(net, before);
        let mut a = before.clone();
        let mut b = before.clone();
        assert_eq!(warmup(&mut a, &train, 0.4, &cfg).unwrap(), 10);
        warmup(&mut b, &train, 0.4, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(warmup(&mut a, &train, 1.5, &cfg).is_err());
    }

    #[test]
    fn warmup_matches_prefix_of_full_run() {
        let (train, test) = separable();
        let cfg = TrainConfig { batch_size: 20, epochs: 1, ..TrainConfig::default() };
        let mut warmed = mlp(4, &[8], 2, 3);
        warmup(&mut warmed, &train, 1.0, &cfg).unwrap();
        let mut full = mlp(4, &[8], 2, 3);
        train_full(&mut full, &train, &test, &cfg).unwrap();
        assert_eq!(warmed.params, full.params);
    }

    #[test]
    fn separable_data_is_learned() {
        let (train, test) = separable();
        let cfg = TrainConfig { batch_size: 16, ..TrainConfig::default() };
        let mut net = mlp(4, &[16], 2, 1);
        let report = train_full(&mut net, &train, &test, &cfg).unwrap();
        assert!(report.test_accuracy > 0.95, "{report:?}");
        assert!(!report.diverged);
        assert_eq!(report.loss_curve.len(), 3);
        assert_eq!(report.steps, 3 * 25);
        let mut again = mlp(4, &[16], 2, 1);
        assert_eq!(train_full(&mut again, &train, &test, &cfg).unwrap(), report);
        assert!(report.curve_csv().starts_with("epoch,train_loss,test_loss\n0,"));
    }

    #[test]
    fn linear_model_separates_wide_margin_classes() {
        let (train, test) = separable();
        let cfg = TrainConfig { batch_size: 16, ..TrainConfig::default() };
        let mut net = mlp(4, &[], 2, 2);
        train_full(&mut net, &train, &test, &cfg).unwrap();
        assert!(evaluate(&net, &train).unwrap().1 > 0.99);
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let (train, test) = separable();
        let cfg = TrainConfig { batch_size: train.len(), epochs: 30, learning_rate: 0.05, ..TrainConfig::default() };
        let mut net = mlp(4, &[], 2, 4);
        let report = train_full(&mut net, &train, &test, &cfg).unwrap();
        for w in report.loss_curve.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-9);
        }
    }

    #[test]
    fn uniform_logits_evaluate_to_chance() {
        let ds = synth_gaussian(10, 3, 2, 1.0, 0).unwrap();
        let mut net = mlp(3, &[], 2, 0);
        net.params.iter_mut().for_each(|p| *p = 0.0);
        let digest = net.param_digest();
        let (loss, acc) = evaluate(&net, &ds).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(acc, 0.5);
        assert_eq!(net.param_digest(), digest);
    }

    #[test]
    fn evaluate_regressions() {
        let ds = synth_gaussian(30, 5, 3, 2.0, 11).unwrap();
        let (loss, acc) = evaluate(&mlp(5, &[6], 3, 12), &ds).unwrap();
        assert_eq!((loss, acc), (1.1255897584320762, 23.0 / 90.0));
        let (loss, acc) = evaluate(&mlp(5, &[4, 4], 3, 13), &ds).unwrap();
        assert_eq!((loss, acc), (1.092803056592384, 41.0 / 90.0));
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig { lr_schedule: LrSchedule::Cosine, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0, 100), 0.02);
        assert!((cfg.lr_at(50, 100) - 0.01).abs() < 1e-15);
        assert!(cfg.lr_at(100, 100).abs() < 1e-15);
        assert_eq!(TrainConfig::default().lr_at(70, 100), 0.02);
    }
}
