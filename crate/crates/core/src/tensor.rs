//! Forward and backward passes for the closed layer set used by both search
//! spaces: `Linear`, `ReLU`, node `Sum`, and a softmax cross-entropy head.
//!
//! A [`Network`] is a straight-line program over value slots. Slot 0 holds the
//! input batch and every layer writes exactly one new slot, so the program is
//! a DAG by construction and backward is a single reverse sweep.
//!
//! All arithmetic is `f64`. Per-sample work runs in a fixed loop order. The
//! batch-mean loss is summed exactly ([`crate::sum::ExactSum`]) and parameter
//! gradients are reduced over the batch by midpoint-split pairwise summation,
//! so results are bit-reproducible and a batch concatenated with itself gives
//! bit-identical loss and gradients.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("layer {layer}: expected input width {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {features} feature rows but {labels} labels")]
    LabelCount { features: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("non-finite activation produced by layer {layer}")]
    Overflow { layer: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: rejects length mismatches and NaN/Inf entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a rank-2 tensor (rank-1 counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// A labelled mini-batch. `loss_weight` multiplies the batch-mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub loss_weight: f64,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self, TensorError> {
        if labels.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        if features.rows() != labels.len() {
            return Err(TensorError::LabelCount {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            loss_weight: 1.0,
        })
    }

    pub fn with_loss_weight(mut self, w: f64) -> Self {
        self.loss_weight = w;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The batch followed by a copy of itself.
    pub fn doubled(&self) -> Batch {
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(self.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&self.labels);
        Batch {
            features: Tensor {
                shape: vec![labels.len(), self.features.cols()],
                data,
            },
            labels,
            loss_weight: self.loss_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// `out = W · in + b`, with `W` stored row-major as `[out_dim][in_dim]`
    /// followed by `b` inside the module's parameter range.
    Linear {
        input: usize,
        output: usize,
        in_dim: usize,
        out_dim: usize,
        module: usize,
    },
    Relu {
        input: usize,
        output: usize,
    },
    /// Elementwise sum of the input slots; no inputs yields zeros.
    Sum {
        inputs: Vec<usize>,
        output: usize,
        dim: usize,
    },
}

impl LayerSpec {
    fn output(&self) -> usize {
        match self {
            LayerSpec::Linear { output, .. }
            | LayerSpec::Relu { output, .. }
            | LayerSpec::Sum { output, .. } => *output,
        }
    }
}

/// A contiguous block of trainable parameters (one per `Linear`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamModule {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    slot_dims: Vec<usize>,
    output_slot: usize,
    num_classes: usize,
    pub params: Vec<f64>,
    module_index: Vec<ParamModule>,
    init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub grads: Vec<f64>,
    pub loss: f64,
}

impl GradBuffer {
    pub fn l2_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Builds a [`Network`] layer by layer. Slot 0 is the input.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    layers: Vec<LayerSpec>,
    slot_dims: Vec<usize>,
    modules: Vec<ParamModule>,
    n_params: usize,
}

impl NetworkBuilder {
    pub fn new(input_dim: usize) -> Self {
        Self {
            layers: Vec::new(),
            slot_dims: vec![input_dim],
            modules: Vec::new(),
            n_params: 0,
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn dim(&self, slot: usize) -> usize {
        self.slot_dims[slot]
    }

    fn new_slot(&mut self, dim: usize) -> usize {
        self.slot_dims.push(dim);
        self.slot_dims.len() - 1
    }

    pub fn linear(&mut self, input: usize, out_dim: usize, name: impl Into<String>) -> usize {
        let in_dim = self.slot_dims[input];
        let len = (in_dim + 1) * out_dim;
        let module = self.modules.len();
        self.modules.push(ParamModule {
            name: name.into(),
            range: self.n_params..self.n_params + len,
        });
        self.n_params += len;
        let output = self.new_slot(out_dim);
        self.layers.push(LayerSpec::Linear {
            input,
            output,
            in_dim,
            out_dim,
            module,
        });
        output
    }

    pub fn relu(&mut self, input: usize) -> usize {
        let output = self.new_slot(self.slot_dims[input]);
        self.layers.push(LayerSpec::Relu { input, output });
        output
    }

    pub fn sum(&mut self, inputs: Vec<usize>, dim: usize) -> usize {
        debug_assert!(inputs.iter().all(|&s| self.slot_dims[s] == dim));
        let output = self.new_slot(dim);
        self.layers.push(LayerSpec::Sum {
            inputs,
            output,
            dim,
        });
        output
    }

    /// Finalizes the program with `output` as the logits slot and draws the
    /// initial parameters.
    ///
    /// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// (Kaiming-uniform with `a = sqrt(5)`). Modules are filled in index order
    /// from a single stream seeded with `init_seed`.
    pub fn finish(self, output: usize, init_seed: u64) -> Network {
        let mut params = vec![0.0; self.n_params];
        let mut rng = rng::seeded(init_seed);
        for layer in &self.layers {
            if let LayerSpec::Linear {
                in_dim, module, ..
            } = *layer
            {
                let range = self.modules[module].range.clone();
                let fan_in = in_dim.max(1) as f64;
                let bound = 1.0 / fan_in.sqrt();
                for v in params[range].iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Network {
            num_classes: self.slot_dims[output],
            layers: self.layers,
            slot_dims: self.slot_dims,
            output_slot: output,
            params,
            module_index: self.modules,
            init_seed,
        }
    }
}

/// A plain MLP: `Linear -> ReLU` per hidden width, then a linear head.
/// An empty `hidden` gives a single linear layer.
pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, init_seed: u64) -> Network {
    let mut b = NetworkBuilder::new(input_dim);
    let mut x = b.input();
    for (i, &w) in hidden.iter().enumerate() {
        x = b.linear(x, w, format!("fc{i}"));
        x = b.relu(x);
    }
    let out = b.linear(x, num_classes, "head");
    b.finish(out, init_seed)
}

struct Activations {
    slots: Vec<Vec<f64>>,
    per_sample_loss: Vec<f64>,
    /// softmax probabilities, `n x classes`
    probs: Vec<f64>,
    macs: u64,
}

impl Network {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn module_index(&self) -> &[ParamModule] {
        &self.module_index
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn input_dim(&self) -> usize {
        self.slot_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Multiply-accumulates of one forward pass for a single sample:
    /// `in_dim * out_dim` per `Linear`. ReLU, sums and the head's softmax are
    /// not counted.
    pub fn flop_count(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Linear { in_dim, out_dim, .. } => (*in_dim * *out_dim) as u64,
                _ => 0,
            })
            .sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize, TensorError> {
        let n = batch.len();
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        if batch.features.rows() != n {
            return Err(TensorError::LabelCount {
                features: batch.features.rows(),
                labels: n,
            });
        }
        if batch.features.cols() != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                layer: 0,
                expected: self.input_dim(),
                got: batch.features.cols(),
            });
        }
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(TensorError::LabelRange {
                label,
                classes: self.num_classes,
            });
        }
        Ok(n)
    }

    fn run(&self, batch: &Batch) -> Result<Activations, TensorError> {
        let n = self.check_batch(batch)?;
        let mut slots: Vec<Vec<f64>> = vec![Vec::new(); self.slot_dims.len()];
        slots[0] = batch.features.data().to_vec();
        let mut macs = 0u64;
        for (li, layer) in self.layers.iter().enumerate() {
            let out = match layer {
                LayerSpec::Linear {
                    input,
                    in_dim,
                    out_dim,
                    module,
                    ..
                } => {
                    let p = &self.params[self.module_index[*module].range.clone()];
                    let (w, b) = p.split_at(in_dim * out_dim);
                    let x = &slots[*input];
                    let mut y = vec![0.0; n * out_dim];
                    for s in 0..n {
                        let xs = &x[s * in_dim..(s + 1) * in_dim];
                        let ys = &mut y[s * out_dim..(s + 1) * out_dim];
                        for (o, yo) in ys.iter_mut().enumerate() {
                            let wo = &w[o * in_dim..(o + 1) * in_dim];
                            let mut acc = b[o];
                            for (wi, xi) in wo.iter().zip(xs) {
                                acc += wi * xi;
                            }
                            *yo = acc;
                        }
                    }
                    macs += (n * in_dim * out_dim) as u64;
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::Overflow { layer: li });
                    }
                    y
                }
                LayerSpec::Relu { input, .. } => {
                    slots[*input].iter().map(|&v| v.max(0.0)).collect()
                }
                LayerSpec::Sum { inputs, dim, .. } => {
                    let mut y = vec![0.0; n * dim];
                    for &i in inputs {
                        for (a, b) in y.iter_mut().zip(&slots[i]) {
                            *a += *b;
                        }
                    }
                    if y.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::Overflow { layer: li });
                    }
                    y
                }
            };
            slots[layer.output()] = out;
        }

        let c = self.num_classes;
        let logits = &slots[self.output_slot];
        let mut probs = vec![0.0; n * c];
        let mut per_sample_loss = Vec::with_capacity(n);
        for s in 0..n {
            let z = &logits[s * c..(s + 1) * c];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &zi) in probs[s * c..(s + 1) * c].iter_mut().zip(z) {
                *p = (zi - m).exp();
                denom += *p;
            }
            for p in &mut probs[s * c..(s + 1) * c] {
                *p /= denom;
            }
            per_sample_loss.push(m + denom.ln() - z[batch.labels[s]]);
        }
        Ok(Activations {
            slots,
            per_sample_loss,
            probs,
            macs,
        })
    }

    fn mean_loss(per_sample: &[f64], weight: f64) -> f64 {
        let total = crate::sum::exact_sum(per_sample.iter().copied());
        weight * (total / per_sample.len() as f64)
    }

    /// Logits and the weighted batch-mean cross-entropy.
    pub fn forward(&self, batch: &Batch) -> Result<(Tensor, f64), TensorError> {
        let acts = self.run(batch)?;
        let loss = Self::mean_loss(&acts.per_sample_loss, batch.loss_weight);
        if !loss.is_finite() {
            return Err(TensorError::Overflow {
                layer: self.layers.len(),
            });
        }
        let logits = Tensor {
            shape: vec![batch.len(), self.num_classes],
            data: acts.slots[self.output_slot].clone(),
        };
        Ok((logits, loss))
    }

    /// Forward pass that also reports the multiply-accumulates actually executed.
    pub fn forward_counting(&self, batch: &Batch) -> Result<(f64, u64), TensorError> {
        let acts = self.run(batch)?;
        Ok((
            Self::mean_loss(&acts.per_sample_loss, batch.loss_weight),
            acts.macs,
        ))
    }

    /// Per-sample losses and predicted classes (first maximal logit).
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<usize>), TensorError> {
        let acts = self.run(batch)?;
        let c = self.num_classes;
        let logits = &acts.slots[self.output_slot];
        let preds = (0..batch.len())
            .map(|s| {
                let z = &logits[s * c..(s + 1) * c];
                let mut best = 0;
                for (i, &v) in z.iter().enumerate() {
                    if v > z[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        Ok((acts.per_sample_loss, preds))
    }

    /// Gradient of the weighted batch-mean loss with respect to `params`.
    pub fn backward(&self, batch: &Batch) -> Result<GradBuffer, TensorError> {
        let acts = self.run(batch)?;
        let n = batch.len();
        let c = self.num_classes;
        let loss = Self::mean_loss(&acts.per_sample_loss, batch.loss_weight);
        if !loss.is_finite() {
            return Err(TensorError::Overflow {
                layer: self.layers.len(),
            });
        }

        let scale = batch.loss_weight / n as f64;
        let mut dslots: Vec<Option<Vec<f64>>> = vec![None; self.slot_dims.len()];
        let mut dlogits = acts.probs;
        for (s, &label) in batch.labels.iter().enumerate() {
            dlogits[s * c + label] -= 1.0;
        }
        for v in &mut dlogits {
            *v *= scale;
        }
        dslots[self.output_slot] = Some(dlogits);

        let mut grads = vec![0.0; self.params.len()];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let Some(dy) = dslots[layer.output()].take() else {
                continue;
            };
            match layer {
                LayerSpec::Linear {
                    input,
                    in_dim,
                    out_dim,
                    module,
                    ..
                } => {
                    let (in_dim, out_dim) = (*in_dim, *out_dim);
                    let range = self.module_index[*module].range.clone();
                    let x = &acts.slots[*input];
                    let g = &mut grads[range.clone()];
                    let mut scratch = Vec::new();
                    pairwise_outer(&dy, x, in_dim, out_dim, 0..n, g, &mut scratch, 0);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::Overflow { layer: li });
                    }
                    if *input != 0 {
                        let w = &self.params[range.start..range.start + in_dim * out_dim];
                        let dx = dslots[*input].get_or_insert_with(|| vec![0.0; n * in_dim]);
                        for s in 0..n {
                            let dxs = &mut dx[s * in_dim..(s + 1) * in_dim];
                            for o in 0..out_dim {
                                let d = dy[s * out_dim + o];
                                for (a, wi) in dxs.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                                    *a += d * wi;
                                }
                            }
                        }
                    }
                }
                LayerSpec::Relu { input, .. } => {
                    if *input != 0 {
                        let x = &acts.slots[*input];
                        let dx = dslots[*input].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for ((a, &d), &xv) in dx.iter_mut().zip(&dy).zip(x) {
                            if xv > 0.0 {
                                *a += d;
                            }
                        }
                    }
                }
                LayerSpec::Sum { inputs, .. } => {
                    for &i in inputs {
                        if i == 0 {
                            continue;
                        }
                        let dx = dslots[i].get_or_insert_with(|| vec![0.0; dy.len()]);
                        for (a, &d) in dx.iter_mut().zip(&dy) {
                            *a += d;
                        }
                    }
                }
            }
        }
        Ok(GradBuffer { grads, loss })
    }

    /// Central differences `(L(θ + h e_j) - L(θ - h e_j)) / 2h` for every parameter.
    pub fn finite_diff_grad(&self, batch: &Batch, step: f64) -> Result<GradBuffer, TensorError> {
        if step.is_nan() || step <= 0.0 {
            return Err(TensorError::BadStep(step));
        }
        let (_, loss) = self.forward(batch)?;
        let mut probe = self.clone();
        let mut grads = Vec::with_capacity(self.params.len());
        for j in 0..self.params.len() {
            let orig = probe.params[j];
            probe.params[j] = orig + step;
            let (_, up) = probe.forward(batch)?;
            probe.params[j] = orig - step;
            let (_, down) = probe.forward(batch)?;
            probe.params[j] = orig;
            grads.push((up - down) / (2.0 * step));
        }
        Ok(GradBuffer { grads, loss })
    }

    /// FNV-1a over the parameter bit patterns; used to assert "no mutation".
    pub fn param_digest(&self) -> u64 {
        let mut h = crate::arch::Fnv1a::new();
        for p in &self.params {
            h.write(&p.to_bits().to_le_bytes());
        }
        h.finish()
    }
}

/// Writes `Σ_s dy_s ⊗ x_s` (weights, then `Σ_s dy_s` for the bias) over the
/// samples in `rows` into `out`.
///
/// The range is split at its midpoint and the halves are added, down to single
/// samples. A range of length `2n` therefore splits at `n`, which is what makes
/// the reduction of `B ++ B` exactly twice that of `B`.
#[allow(clippy::too_many_arguments)]
fn pairwise_outer(
    dy: &[f64],
    x: &[f64],
    in_dim: usize,
    out_dim: usize,
    rows: Range<usize>,
    out: &mut [f64],
    scratch: &mut Vec<Vec<f64>>,
    depth: usize,
) {
    if rows.len() == 1 {
        let s = rows.start;
        let xs = &x[s * in_dim..(s + 1) * in_dim];
        let ds = &dy[s * out_dim..(s + 1) * out_dim];
        let (w, b) = out.split_at_mut(in_dim * out_dim);
        for (o, &d) in ds.iter().enumerate() {
            for (wi, xi) in w[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xs) {
                *wi = d * xi;
            }
            b[o] = d;
        }
        return;
    }
    let mid = rows.start + rows.len() / 2;
    pairwise_outer(dy, x, in_dim, out_dim, rows.start..mid, out, scratch, depth + 1);
    if scratch.len() <= depth {
        scratch.resize_with(depth + 1, Vec::new);
    }
    let mut right = std::mem::take(&mut scratch[depth]);
    right.resize(out.len(), 0.0);
    pairwise_outer(dy, x, in_dim, out_dim, mid..rows.end, &mut right, scratch, depth + 1);
    for (a, b) in out.iter_mut().zip(&right) {
        *a += b;
    }
    scratch[depth] = right;
}
