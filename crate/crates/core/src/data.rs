//! Labeled feature datasets and the synthetic Gaussian-cluster generator.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::util::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("label {label} of sample {id} is not below class count {classes}")]
    LabelOutOfRange { id: u64, label: u32, classes: u32 },
    #[error("non-finite feature in sample {0}")]
    NonFinite(u64),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("unknown sample id {0}")]
    UnknownId(u64),
}

/// Feature vectors with class labels. Features are sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    sample_ids: Vec<u64>,
    labels: Vec<u32>,
    features: Vec<f64>,
    dims: usize,
    n_classes: u32,
}

impl LabeledDataset {
    pub fn new(
        sample_ids: Vec<u64>,
        labels: Vec<u32>,
        features: Vec<f64>,
        dims: usize,
        n_classes: u32,
    ) -> Result<Self, DataError> {
        if dims == 0 {
            return Err(DataError::Invalid("feature dimension must be positive".into()));
        }
        if labels.len() != sample_ids.len() || features.len() != sample_ids.len() * dims {
            return Err(DataError::Invalid(format!(
                "{} ids, {} labels and {} feature values do not describe {}-dimensional samples",
                sample_ids.len(),
                labels.len(),
                features.len(),
                dims
            )));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        for &id in &sample_ids {
            if !seen.insert(id) {
                return Err(DataError::DuplicateId(id));
            }
        }
        for (m, &label) in labels.iter().enumerate() {
            if label >= n_classes {
                return Err(DataError::LabelOutOfRange {
                    id: sample_ids[m],
                    label,
                    classes: n_classes,
                });
            }
            if features[m * dims..(m + 1) * dims].iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(sample_ids[m]));
            }
        }
        Ok(Self {
            sample_ids,
            labels,
            features,
            dims,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self, m: usize) -> &[f64] {
        &self.features[m * self.dims..(m + 1) * self.dims]
    }

    /// Samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Self {
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features,
            dims: self.dims,
            n_classes: self.n_classes,
        }
    }

    /// Row indices of `ids`, in the given order.
    pub fn indices_of(&self, ids: &[u64]) -> Result<Vec<usize>, DataError> {
        let pos: std::collections::HashMap<u64, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        ids.iter()
            .map(|id| pos.get(id).copied().ok_or(DataError::UnknownId(*id)))
            .collect()
    }

    /// CSV with header `id,label,f1,...,fd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label");
        for j in 1..=self.dims {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for m in 0..self.len() {
            write!(out, "{},{}", self.sample_ids[m], self.labels[m]).unwrap();
            for v in self.features(m) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`LabeledDataset::to_csv`] output. Without `n_classes` the
    /// class count is one more than the largest label.
    pub fn from_csv(text: &str, n_classes: Option<u32>) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(DataError::Csv {
            line: 1,
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
            return Err(DataError::Csv {
                line: 1,
                message: "header must start with id,label and name at least one feature".into(),
            });
        }
        let dims = cols.len() - 2;
        let (mut ids, mut labels, mut features) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines {
            let err = |message: String| DataError::Csv { line: i + 1, message };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(err(format!(
                    "expected {} fields, got {}",
                    cols.len(),
                    fields.len()
                )));
            }
            ids.push(fields[0].parse::<u64>().map_err(|e| err(format!("id: {e}")))?);
            labels.push(fields[1].parse::<u32>().map_err(|e| err(format!("label: {e}")))?);
            for f in &fields[2..] {
                features.push(f.parse::<f64>().map_err(|e| err(format!("feature: {e}")))?);
            }
        }
        let classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Self::new(ids, labels, features, dims, classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: u32,
    pub per_class: usize,
    pub dims: usize,
    /// Standard deviation of every cluster around its mean.
    pub cluster_spread: f64,
    pub label_noise_fraction: f64,
    pub seed: u64,
    /// First sample id; ids are consecutive from here.
    pub id_offset: u64,
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: LabeledDataset,
    /// Ids whose label was replaced by a different, random class.
    pub flipped_ids: Vec<u64>,
}

/// Gaussian clusters, one per class.
///
/// With `classes <= dims` the class means are the unit basis vectors (a
/// regular simplex); otherwise they sit evenly on the unit circle of the
/// first two coordinates. Exactly `floor(label_noise_fraction * N)` samples
/// then receive a uniformly drawn wrong label.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Synthetic, DataError> {
    let c = spec.classes as usize;
    if c < 2 {
        return Err(DataError::Invalid("need at least 2 classes".into()));
    }
    if spec.per_class == 0 {
        return Err(DataError::Invalid("per_class must be at least 1".into()));
    }
    if spec.dims == 0 || (c > spec.dims && spec.dims < 2) {
        return Err(DataError::Invalid(format!(
            "cannot place {c} class means in {} dimensions",
            spec.dims
        )));
    }
    if !(0.0..=1.0).contains(&spec.label_noise_fraction) {
        return Err(DataError::Invalid(
            "label_noise_fraction must be in [0, 1]".into(),
        ));
    }
    if !spec.cluster_spread.is_finite() || spec.cluster_spread < 0.0 {
        return Err(DataError::Invalid(
            "cluster_spread must be finite and >= 0".into(),
        ));
    }

    let d = spec.dims;
    let mean = |k: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        if c <= d {
            m[k] = 1.0;
        } else {
            let angle = std::f64::consts::TAU * k as f64 / c as f64;
            m[0] = angle.cos();
            m[1] = angle.sin();
        }
        m
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let n = c * spec.per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for k in 0..c {
        let mu = mean(k);
        for _ in 0..spec.per_class {
            for &centre in &mu {
                let z: f64 = rng.sample(StandardNormal);
                features.push(centre + spec.cluster_spread * z);
            }
            labels.push(k as u32);
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1]));
    let n_flip = (spec.label_noise_fraction * n as f64 + 1e-9).floor() as usize;
    let mut flipped: Vec<usize> = index::sample(&mut noise_rng, n, n_flip).into_vec();
    flipped.sort_unstable();
    for &i in &flipped {
        let shift = noise_rng.random_range(1..c as u32);
        labels[i] = (labels[i] + shift) % c as u32;
    }

    let sample_ids: Vec<u64> = (0..n as u64).map(|i| spec.id_offset + i).collect();
    let flipped_ids = flipped.iter().map(|&i| sample_ids[i]).collect();
    Ok(Synthetic {
        dataset: LabeledDataset::new(sample_ids, labels, features, d, spec.classes)?,
        flipped_ids,
    })
}
