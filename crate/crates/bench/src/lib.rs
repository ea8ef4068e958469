//! Shared fixtures for the kernel benchmarks.

use sigeo_core::data::synth_gaussian;
use sigeo_core::{Batch, Dataset};

pub const DIMS: usize = 32;
pub const CLASSES: usize = 10;

/// A synthetic dataset large enough for `k` batches of `batch_size`.
pub fn dataset(batch_size: usize, k: usize) -> Dataset {
    let n_per_class = (batch_size * k).div_ceil(CLASSES);
    synth_gaussian(n_per_class, DIMS, CLASSES, 6.0, 1).expect("valid synthetic config")
}

/// `k` consecutive batches of `batch_size` rows.
pub fn batches(data: &Dataset, batch_size: usize, k: usize) -> Vec<Batch> {
    (0..k)
        .map(|i| data.batch(&(i * batch_size..(i + 1) * batch_size).collect::<Vec<_>>()))
        .collect()
}
