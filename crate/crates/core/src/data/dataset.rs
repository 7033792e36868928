use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng;

/// Class id -> row indices into a [`LabeledDataset`].
pub type ClassPools = BTreeMap<usize, Vec<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// `[height, width, channels]`; height must equal width.
    pub input_shape: [usize; 3],
    pub seed: u64,
    /// Number of distinct blob layouts per class.
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    #[serde(default = "default_blobs")]
    pub blobs_per_mode: usize,
    #[serde(default = "default_noise")]
    pub pixel_noise: f64,
}

fn default_modes() -> usize {
    3
}
fn default_blobs() -> usize {
    3
}
fn default_noise() -> f64 {
    0.35
}

impl DatasetSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, input_shape: [usize; 3], seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            input_shape,
            seed,
            modes_per_class: default_modes(),
            blobs_per_mode: default_blobs(),
            pixel_noise: default_noise(),
        }
    }

    /// The 20-class 8x8 single-channel toy benchmark.
    pub fn toy(seed: u64) -> Self {
        Self::new(20, 100, [8, 8, 1], seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument("dataset dimensions must be positive".into()));
        }
        if h != w {
            return Err(Error::InvalidArgument(format!(
                "input must be square for rotation, got {h}x{w}"
            )));
        }
        if self.samples_per_class < 10 {
            return Err(Error::InvalidArgument(
                "samples_per_class must be at least 10".into(),
            ));
        }
        if self.modes_per_class == 0 || self.blobs_per_mode == 0 || self.pixel_noise < 0.0 {
            return Err(Error::InvalidArgument("invalid pattern parameters".into()));
        }
        Ok(())
    }
}

/// Row-major `N x (H*W*C)` inputs in HWC layout with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.inputs.select(Axis(0), indices)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn pools(&self) -> ClassPools {
        let mut pools = ClassPools::new();
        for (i, &y) in self.labels.iter().enumerate() {
            pools.entry(y).or_default().push(i);
        }
        pools
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    width: f64,
    amplitude: f64,
    channel_gain: Vec<f64>,
}

/// Generates a dataset whose classes are mixtures of Gaussian-blob layouts
/// on the image grid plus pixel noise. Multiple layouts per class make the
/// classes hard for a linear model in pixel space while a small MLP can
/// separate them. Row order is class-major.
pub fn gen_synthetic_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let [h, w, c] = spec.input_shape;
    let dim = spec.input_dim();
    let n = spec.num_classes * spec.samples_per_class;
    let mut inputs = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    for class in 0..spec.num_classes {
        let mut layout_rng = rng::substream(spec.seed, "dataset-layout", class as u64);
        let modes: Vec<Vec<Blob>> = (0..spec.modes_per_class)
            .map(|_| {
                (0..spec.blobs_per_mode)
                    .map(|_| {
                        let sign = if layout_rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        Blob {
                            cy: layout_rng.random_range(0.0..(h as f64 - 1.0).max(f64::EPSILON)),
                            cx: layout_rng.random_range(0.0..(w as f64 - 1.0).max(f64::EPSILON)),
                            width: layout_rng.random_range(0.7..1.6),
                            amplitude: sign * layout_rng.random_range(0.6..1.4),
                            channel_gain: (0..c).map(|_| layout_rng.random_range(0.5..1.0)).collect(),
                        }
                    })
                    .collect()
            })
            .collect();

        let mut sample_rng = rng::substream(spec.seed, "dataset-samples", class as u64);
        for s in 0..spec.samples_per_class {
            let row_idx = class * spec.samples_per_class + s;
            let mode = &modes[sample_rng.random_range(0..modes.len())];
            let mut row = inputs.row_mut(row_idx);
            for blob in mode {
                let cy = blob.cy + 0.4 * std_normal.sample(&mut sample_rng);
                let cx = blob.cx + 0.4 * std_normal.sample(&mut sample_rng);
                let amp = blob.amplitude * (1.0 + 0.15 * std_normal.sample(&mut sample_rng));
                let denom = 2.0 * blob.width * blob.width;
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        let v = amp * (-(dy * dy + dx * dx) / denom).exp();
                        for (ch, gain) in blob.channel_gain.iter().enumerate() {
                            row[(y * w + x) * c + ch] += v * gain;
                        }
                    }
                }
            }
            for v in row.iter_mut() {
                *v += spec.pixel_noise * std_normal.sample(&mut sample_rng);
            }
            labels.push(class);
        }
    }
    Ok(LabeledDataset {
        inputs,
        labels,
        num_classes: spec.num_classes,
        input_shape: spec.input_shape,
    })
}

/// Stratified train / held-out split, fixed by the dataset seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: ClassPools,
    pub test: Vec<usize>,
}

pub fn split_holdout(dataset: &LabeledDataset, test_frac: f64, seed: u64) -> Result<DataSplit> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in [0, 1), got {test_frac}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let mut train = ClassPools::new();
    let mut test = Vec::new();
    for (class, mut idx) in dataset.pools() {
        let mut r = rng::substream(seed, "holdout", class as u64);
        idx.shuffle(&mut r);
        let n_test = ((idx.len() as f64) * test_frac).round() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        let (t, tr) = idx.split_at(n_test);
        test.extend_from_slice(t);
        let mut tr = tr.to_vec();
        tr.sort_unstable();
        train.insert(class, tr);
    }
    test.sort_unstable();
    Ok(DataSplit { train, test })
}
