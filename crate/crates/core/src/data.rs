//! Datasets, the IDX reader/writer, the Gaussian-cluster generator and
//! seeded batch streams.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Batch, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x} at byte 0, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated at byte {offset}: needed {needed} bytes, file has {len}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("{path}: {extra} trailing bytes after byte {offset}")]
    TrailingBytes {
        path: PathBuf,
        offset: usize,
        extra: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("batch size {batch_size} exceeds dataset size {n}")]
    BatchTooLarge { batch_size: usize, n: usize },
    #[error("dataset file not found: {0} (set the path in the config or SIGEO_DATA_DIR)")]
    Missing(PathBuf),
}

/// Per-feature affine normalization `(x - mean) / std`. Features with zero
/// variance are mapped to 0 and recorded with `std = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dims: usize,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dims: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if dims == 0 {
            return Err(DataError::Invalid("dataset has zero features".into()));
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if features.len() != labels.len() * dims {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} samples of width {dims}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {l} outside [0, {num_classes})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            dims,
            labels,
            num_classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// Copies the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(Tensor::new(vec![indices.len(), self.dims], data).expect("dataset rows are finite"), labels)
            .expect("non-empty batch")
    }

    /// Per-feature mean and population std of this dataset.
    pub fn fit_normalization(&self) -> Normalization {
        let n = self.len() as f64;
        let d = self.dims;
        let mean: Vec<f64> = (0..d)
            .map(|j| crate::sum::exact_sum((0..self.len()).map(|i| self.features[i * d + j])) / n)
            .collect();
        let std = mean
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let var = crate::sum::exact_sum((0..self.len()).map(|i| {
                    let c = self.features[i * d + j] - m;
                    c * c
                })) / n;
                var.sqrt()
            })
            .collect();
        Normalization { mean, std }
    }

    /// Applies `norm` and records it. Zero-variance features become 0.
    pub fn apply_normalization(&mut self, norm: &Normalization) -> Result<(), DataError> {
        if norm.mean.len() != self.dims || norm.std.len() != self.dims {
            return Err(DataError::Invalid("normalization width does not match dataset".into()));
        }
        let d = self.dims;
        for (k, v) in self.features.iter_mut().enumerate() {
            let j = k % d;
            let s = norm.std[j];
            *v = if s > 0.0 { (*v - norm.mean[j]) / s } else { 0.0 };
        }
        self.normalization = Some(norm.clone());
        Ok(())
    }
}

/// A train/test pair normalized with training-split statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplit {
    pub fn new(mut train: Dataset, mut test: Dataset, normalize: bool) -> Result<Self, DataError> {
        if train.dims != test.dims || train.num_classes != test.num_classes {
            return Err(DataError::Invalid("train and test splits have different shapes".into()));
        }
        if normalize {
            let norm = train.fit_normalization();
            train.apply_normalization(&norm)?;
            test.apply_normalization(&norm)?;
        }
        Ok(Self { train, test })
    }

    pub fn task(&self) -> crate::arch::TaskShape {
        crate::arch::TaskShape {
            input_dim: self.train.dims,
            num_classes: self.train.num_classes,
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(DataError::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.pos != self.bytes.len() {
            return Err(DataError::TrailingBytes {
                path: self.path.to_path_buf(),
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::Missing(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Parsed IDX image file: `count` images of `rows x cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<IdxImages, DataError> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let size = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .unwrap_or(usize::MAX);
    let pixels = r.take(size)?.to_vec();
    r.finish()?;
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32_be()? as usize;
    let labels = r.take(count)?.to_vec();
    r.finish()?;
    Ok(labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and flattened
/// to `rows * cols` features; the class count is `max(label) + 1`, at least 2.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    idx_to_dataset(&images, &labels, None)
}

pub fn idx_to_dataset(images: &IdxImages, labels: &[u8], num_classes: Option<usize>) -> Result<Dataset, DataError> {
    if images.count() != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        });
    }
    let features = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(features, images.rows * images.cols, labels, classes)
}

/// Gaussian clusters with unit isotropic noise. Class `c` is centred at
/// `margin * (c / dims + 1) * e_(c mod dims)`, so with `dims >= n_classes` the
/// centres are `margin * e_c`. Samples are stored class-major.
pub fn synth_gaussian(n_per_class: usize, dims: usize, n_classes: usize, margin: f64, seed: u64) -> Result<Dataset, DataError> {
    if n_per_class == 0 || dims == 0 || n_classes == 0 || margin.is_nan() || margin <= 0.0 {
        return Err(DataError::Invalid(
            "synthetic data needs positive sizes and margin".into(),
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut features = Vec::with_capacity(n_per_class * n_classes * dims);
    let mut labels = Vec::with_capacity(n_per_class * n_classes);
    for c in 0..n_classes {
        let axis = c % dims;
        let scale = margin * ((c / dims) + 1) as f64;
        for _ in 0..n_per_class {
            for j in 0..dims {
                let centre = if j == axis { scale } else { 0.0 };
                features.push(centre + Distribution::<f64>::sample(&StandardNormal, &mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(features, dims, labels, n_classes)
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n_per_class: usize,
        test_per_class: usize,
        dims: usize,
        classes: usize,
        margin: f64,
        seed: u64,
    },
    /// MNIST-style IDX files. `dir` falls back to `SIGEO_DATA_DIR`.
    Idx {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_train_images")]
        train_images: String,
        #[serde(default = "default_train_labels")]
        train_labels: String,
        #[serde(default = "default_test_images")]
        test_images: String,
        #[serde(default = "default_test_labels")]
        test_labels: String,
    },
}

fn default_train_images() -> String {
    "train-images-idx3-ubyte".into()
}
fn default_train_labels() -> String {
    "train-labels-idx1-ubyte".into()
}
fn default_test_images() -> String {
    "t10k-images-idx3-ubyte".into()
}
fn default_test_labels() -> String {
    "t10k-labels-idx1-ubyte".into()
}

pub const DATA_DIR_ENV: &str = "SIGEO_DATA_DIR";

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            n_per_class: 6000,
            test_per_class: 1000,
            dims: 32,
            classes: 10,
            margin: 6.0,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    /// Builds the normalized train/test split.
    pub fn load(&self) -> Result<DataSplit, DataError> {
        match self {
            DatasetConfig::Synthetic {
                n_per_class,
                test_per_class,
                dims,
                classes,
                margin,
                seed,
            } => {
                let train = synth_gaussian(*n_per_class, *dims, *classes, *margin, *seed)?;
                let test = synth_gaussian(*test_per_class, *dims, *classes, *margin, rng::derive_seed(*seed, &[1]))?;
                DataSplit::new(train, test, true)
            }
            DatasetConfig::Idx {
                dir,
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_ENV)
                        .map(PathBuf::from)
                        .ok_or_else(|| DataError::Missing(PathBuf::from(train_images)))?,
                };
                let tr_img = parse_idx_images(&dir.join(train_images), &read_file(&dir.join(train_images))?)?;
                let tr_lab = parse_idx_labels(&dir.join(train_labels), &read_file(&dir.join(train_labels))?)?;
                let te_img = parse_idx_images(&dir.join(test_images), &read_file(&dir.join(test_images))?)?;
                let te_lab = parse_idx_labels(&dir.join(test_labels), &read_file(&dir.join(test_labels))?)?;
                let classes = tr_lab
                    .iter()
                    .chain(&te_lab)
                    .max()
                    .map_or(2, |&m| (m as usize + 1).max(2));
                let train = idx_to_dataset(&tr_img, &tr_lab, Some(classes))?;
                let test = idx_to_dataset(&te_img, &te_lab, Some(classes))?;
                DataSplit::new(train, test, true)
            }
        }
    }
}

/// A deterministic, endless sequence of drop-last mini-batches.
///
/// Epoch `e` visits the samples in a Fisher-Yates permutation seeded with
/// `derive_seed(shuffle_seed, [e])`; global batch `t` is batch
/// `t % batches_per_epoch` of epoch `t / batches_per_epoch`. Warm-up consumes
/// batches `[0, w)` and proxy statistics use `[w, w + k)`, so the two regions
/// never share a sample as long as `w + k <= batches_per_epoch`.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    cursor: usize,
    cached: Option<(usize, Vec<usize>)>,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(DataError::BatchTooLarge {
                batch_size,
                n: dataset.len(),
            });
        }
        Ok(Self {
            dataset,
            batch_size,
            shuffle_seed,
            cursor: 0,
            cached: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn seek(&mut self, batch: usize) {
        self.cursor = batch;
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive_seed(self.shuffle_seed, &[epoch as u64])));
        order
    }

    /// Sample indices of global batch `t`.
    pub fn indices(&mut self, t: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, b) = (t / per, t % per);
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.cached.as_ref().unwrap().1;
        order[b * self.batch_size..(b + 1) * self.batch_size].to_vec()
    }

    pub fn batch_at(&mut self, t: usize) -> Batch {
        let idx = self.indices(t);
        self.dataset.batch(&idx)
    }

    pub fn next_batch(&mut self) -> Batch {
        let b = self.batch_at(self.cursor);
        self.cursor += 1;
        b
    }

    /// `k` consecutive batches starting at global batch `start`.
    pub fn take_batches(&mut self, start: usize, k: usize) -> Vec<Batch> {
        (start..start + k).map(|t| self.batch_at(t)).collect()
    }
}
