//! Classification datasets: synthetic generators, stratified splits,
//! z-score normalisation and seeded mini-batching.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Minimum standard deviation used when normalising a feature.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Data(format!("features must be 2-D, got {:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        if features.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Data("NaN feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split_tag(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let features = self.features.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.num_classes, split)
    }

    /// Shuffles with `seed` and cuts into batches of `batch_size`; the last
    /// batch may be smaller.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(param_err("batch_size", "must be positive"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
            .chunks(batch_size)
            .map(|idx| {
                Ok(Batch {
                    x: self.features.gather_rows(idx)?,
                    labels: idx.iter().map(|&i| self.labels[i]).collect(),
                })
            })
            .collect()
    }
}

/// Isotropic Gaussian clusters. Class means sit on the unit circle in the
/// first two coordinates (on a line when `d == 1`); `spread` is the noise
/// standard deviation.
pub fn gen_gaussian_blobs(c: usize, n_per_class: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if c < 2 {
        return Err(param_err("classes", format!("need at least 2, got {c}")));
    }
    if n_per_class == 0 || d == 0 {
        return Err(param_err("n_per_class", "sizes must be positive"));
    }
    if !(spread >= 0.0) {
        return Err(param_err("spread", format!("must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * n_per_class * d);
    let mut labels = Vec::with_capacity(c * n_per_class);
    for k in 0..c {
        let mut mean = vec![0.0; d];
        if d == 1 {
            mean[0] = k as f64;
        } else {
            let angle = 2.0 * PI * k as f64 / c as f64;
            mean[0] = math::cos(angle);
            mean[1] = math::sin(angle);
        }
        for _ in 0..n_per_class {
            for &m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spread * z);
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![c * n_per_class, d], data)?, labels, c, Split::Full)
}

/// Interleaved 2-D spiral arms, one per class. Angular noise is Gaussian
/// with standard deviation `noise` (radians).
pub fn gen_spirals(c: usize, n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if c < 2 {
        return Err(param_err("classes", format!("need at least 2, got {c}")));
    }
    if n_per_class == 0 {
        return Err(param_err("n_per_class", "must be positive"));
    }
    if !(noise >= 0.0) {
        return Err(param_err("noise", format!("must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * n_per_class * 2);
    let mut labels = Vec::with_capacity(c * n_per_class);
    let denom = if n_per_class > 1 { (n_per_class - 1) as f64 } else { 1.0 };
    for k in 0..c {
        for i in 0..n_per_class {
            let t = i as f64 / denom;
            let r = 0.05 + 0.95 * t;
            let z: f64 = StandardNormal.sample(&mut rng);
            let theta = 2.0 * PI * k as f64 / c as f64 + 4.0 * t + noise * z;
            data.push(r * math::sin(theta));
            data.push(r * math::cos(theta));
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![c * n_per_class, 2], data)?, labels, c, Split::Full)
}

/// Stratified seeded split into `(train, val)`.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(param_err(
            "val_fraction",
            format!("must lie in (0, 1), got {val_fraction}"),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!("class {k} has fewer than 2 samples")));
        }
        members.shuffle(&mut rng);
        let n_val = libm::round(members.len() as f64 * val_fraction) as usize;
        let n_val = n_val.clamp(1, members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train, Split::Train)?, dataset.subset(&val, Split::Val)?))
}

/// Per-feature z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len() as f64, train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..train.len() {
            mean.iter_mut().zip(train.features.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..train.len() {
            for ((v, x), m) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = math::sqrt(v / n);
                if s < STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::Dimension {
                op: "normalize",
                lhs: vec![self.mean.len()],
                rhs: ds.features.shape().to_vec(),
            });
        }
        let d = ds.dim();
        let data = ds
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i % d]) / self.std[i % d])
            .collect();
        Dataset::new(
            Tensor::new(ds.features.shape().to_vec(), data)?,
            ds.labels.clone(),
            ds.num_classes,
            ds.split,
        )
    }
}
