//! A small deterministic trainer: softmax regression or a one-hidden-layer
//! ReLU network, fitted by minibatch SGD on cross-entropy, recording the
//! per-sample loss of a train and a query split after every epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::trajectory::{Dtype, TrajectoryDataset, TrajectoryError, TrajectoryWriter};
use crate::util::derive_seed;

const INIT_STREAM: u64 = 0x494e4954;
const SHUFFLE_STREAM: u64 = 0x53485546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: model expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class count mismatch: model has {model} classes, data has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("label {label} not below class count {classes}")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ModelKind {
    Softmax,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weights start uniform in `±scale / sqrt(fan_in)`; 0 gives an all-zero model.
    pub weight_init_scale: f64,
    pub weight_decay: f64,
    /// Precision of the recorded trajectories.
    pub record_dtype: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Softmax,
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            weight_init_scale: 1.0,
            weight_decay: 0.0,
            record_dtype: Dtype::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_init_scale >= 0.0 && self.weight_init_scale.is_finite()) {
            return bad("weight_init_scale must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return bad("mlp needs at least one hidden unit");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub label: u32,
}

/// Model parameters in one flat buffer.
///
/// Softmax layout: `W[c][d]`, `b[c]`.
/// MLP layout: `W1[h][d]`, `b1[h]`, `W2[c][h]`, `b2[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    kind: ModelKind,
    inputs: usize,
    classes: usize,
    params: Vec<f64>,
}

struct Layer {
    offset: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

fn affine(params: &[f64], layer: &Layer, x: &[f64]) -> Vec<f64> {
    let w = &params[layer.weights()];
    let b = &params[layer.biases()];
    (0..layer.fan_out)
        .map(|o| {
            let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
            row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ToyModel {
    pub fn zeros(kind: ModelKind, inputs: usize, classes: usize) -> Self {
        let mut model = Self {
            kind,
            inputs,
            classes,
            params: Vec::new(),
        };
        model.params = vec![0.0; model.layers().iter().map(|l| l.biases().end - l.offset).sum()];
        model
    }

    /// Uniform weights in `±scale / sqrt(fan_in)`, zero biases.
    pub fn init(kind: ModelKind, inputs: usize, classes: usize, scale: f64, seed: u64) -> Self {
        let mut model = Self::zeros(kind, inputs, classes);
        if scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[INIT_STREAM]));
            for layer in model.layers() {
                let s = scale / (layer.fan_in as f64).sqrt();
                for w in &mut model.params[layer.weights()] {
                    *w = rng.random_range(-s..=s);
                }
            }
        }
        model
    }

    fn layers(&self) -> Vec<Layer> {
        match self.kind {
            ModelKind::Softmax => vec![Layer {
                offset: 0,
                fan_in: self.inputs,
                fan_out: self.classes,
            }],
            ModelKind::Mlp { hidden } => {
                let second = hidden * self.inputs + hidden;
                vec![
                    Layer {
                        offset: 0,
                        fan_in: self.inputs,
                        fan_out: hidden,
                    },
                    Layer {
                        offset: second,
                        fan_in: hidden,
                        fan_out: self.classes,
                    },
                ]
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// True for weight entries, false for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for layer in self.layers() {
            mask[layer.weights()].fill(true);
        }
        mask
    }

    fn check_input(&self, x: &[f64]) -> Result<(), TrainError> {
        if x.len() != self.inputs {
            return Err(TrainError::DimensionMismatch {
                expected: self.inputs,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: u32) -> Result<(), TrainError> {
        if label as usize >= self.classes {
            return Err(TrainError::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, TrainError> {
        self.check_input(x)?;
        let layers = self.layers();
        Ok(match self.kind {
            ModelKind::Softmax => affine(&self.params, &layers[0], x),
            ModelKind::Mlp { .. } => {
                let h: Vec<f64> = affine(&self.params, &layers[0], x)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                affine(&self.params, &layers[1], &h)
            }
        })
    }
}

/// Cross-entropy `-log softmax(logits)[label]`, via log-sum-exp.
pub fn loss_of(model: &ToyModel, sample: Sample<'_>) -> Result<f64, TrainError> {
    model.check_label(sample.label)?;
    let z = model.logits(sample.features)?;
    Ok(log_sum_exp(&z) - z[sample.label as usize])
}

/// Argmax of the logits; ties resolve to the lowest class.
pub fn predict(model: &ToyModel, features: &[f64]) -> Result<u32, TrainError> {
    let z = model.logits(features)?;
    let mut best = 0;
    for (k, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = k;
        }
    }
    Ok(best as u32)
}

/// Adds the loss gradient of one sample into `grad`.
fn accumulate_gradient(model: &ToyModel, sample: Sample<'_>, grad: &mut [f64]) -> Result<(), TrainError> {
    model.check_label(sample.label)?;
    model.check_input(sample.features)?;
    let x = sample.features;
    let layers = model.layers();
    let softmax_delta = |z: Vec<f64>| -> Vec<f64> {
        let lse = log_sum_exp(&z);
        let mut dz: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        dz[sample.label as usize] -= 1.0;
        dz
    };
    let outer = |grad: &mut [f64], layer: &Layer, delta: &[f64], input: &[f64]| {
        let w = layer.weights();
        for (o, d) in delta.iter().enumerate() {
            let row = &mut grad[w.start + o * layer.fan_in..w.start + (o + 1) * layer.fan_in];
            for (g, xi) in row.iter_mut().zip(input) {
                *g += d * xi;
            }
        }
        for (g, d) in grad[layer.biases()].iter_mut().zip(delta) {
            *g += d;
        }
    };
    match model.kind {
        ModelKind::Softmax => {
            let dz = softmax_delta(affine(&model.params, &layers[0], x));
            outer(grad, &layers[0], &dz, x);
        }
        ModelKind::Mlp { .. } => {
            let pre = affine(&model.params, &layers[0], x);
            let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let dz = softmax_delta(affine(&model.params, &layers[1], &h));
            outer(grad, &layers[1], &dz, &h);
            let w2 = &model.params[layers[1].weights()];
            let hidden = layers[1].fan_in;
            let dpre: Vec<f64> = (0..hidden)
                .map(|j| {
                    if pre[j] > 0.0 {
                        dz.iter().enumerate().map(|(o, d)| d * w2[o * hidden + j]).sum()
                    } else {
                        0.0
                    }
                })
                .collect();
            outer(grad, &layers[0], &dpre, x);
        }
    }
    Ok(())
}

/// Mean cross-entropy gradient over `batch`, plus `weight_decay * w` on
/// weights (biases are not decayed).
pub fn gradient(model: &ToyModel, batch: &[Sample<'_>], weight_decay: f64) -> Result<Vec<f64>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grad = vec![0.0; model.param_count()];
    for s in batch {
        accumulate_gradient(model, *s, &mut grad)?;
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv;
    }
    if weight_decay != 0.0 {
        for layer in model.layers() {
            for i in layer.weights() {
                grad[i] += weight_decay * model.params[i];
            }
        }
    }
    Ok(grad)
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences of [`loss_of`] with step `h`.
pub fn grad_check(model: &ToyModel, sample: Sample<'_>, h: f64) -> Result<f64, TrainError> {
    let analytic = gradient(model, &[sample], 0.0)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = loss_of(&probe, sample)?;
        probe.params[i] = orig - h;
        let down = loss_of(&probe, sample)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_data(model: &ToyModel, data: &LabeledDataset) -> Result<(), TrainError> {
    if data.dims() != model.inputs {
        return Err(TrainError::DimensionMismatch {
            expected: model.inputs,
            got: data.dims(),
        });
    }
    if data.n_classes() as usize > model.classes {
        return Err(TrainError::ClassMismatch {
            model: model.classes,
            data: data.n_classes() as usize,
        });
    }
    Ok(())
}

/// Per-sample losses of `data` under `model`.
pub fn losses(model: &ToyModel, data: &LabeledDataset) -> Result<Vec<f64>, TrainError> {
    (0..data.len())
        .map(|m| {
            loss_of(
                model,
                Sample {
                    features: data.features(m),
                    label: data.labels()[m],
                },
            )
        })
        .collect()
}

pub fn predictions(model: &ToyModel, data: &LabeledDataset) -> Result<Vec<u32>, TrainError> {
    (0..data.len())
        .map(|m| predict(model, data.features(m)))
        .collect()
}

pub fn accuracy(model: &ToyModel, data: &LabeledDataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds = predictions(model, data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Runs SGD, calling `on_snapshot` with the model before training and after
/// every epoch.
fn run_sgd<F>(
    data: &LabeledDataset,
    n_classes: usize,
    config: &TrainConfig,
    mut on_snapshot: F,
) -> Result<ToyModel, TrainError>
where
    F: FnMut(&ToyModel) -> Result<(), TrainError>,
{
    config.validate()?;
    let mut model = ToyModel::init(
        config.model,
        data.dims(),
        n_classes,
        config.weight_init_scale,
        config.seed,
    );
    check_data(&model, data)?;
    on_snapshot(&model)?;
    let shuffle_seed = derive_seed(config.seed, &[SHUFFLE_STREAM]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&m| Sample {
                    features: data.features(m),
                    label: data.labels()[m],
                })
                .collect();
            let grad = gradient(&model, &batch, config.weight_decay)?;
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        on_snapshot(&model)?;
    }
    Ok(model)
}

/// Trains on `data` without recording trajectories.
pub fn train(data: &LabeledDataset, n_classes: usize, config: &TrainConfig) -> Result<ToyModel, TrainError> {
    run_sgd(data, n_classes, config, |_| Ok(()))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ToyModel,
    pub train_trajectory: TrajectoryDataset,
    pub query_trajectory: TrajectoryDataset,
}

/// Trains on `train` and records the loss of every train and query sample
/// at snapshot 0 and after each epoch, both at the same parameters. Query
/// samples only ever see forward passes.
pub fn train_with_logging(
    train: &LabeledDataset,
    query: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    if query.dims() != train.dims() {
        return Err(TrainError::DimensionMismatch {
            expected: train.dims(),
            got: query.dims(),
        });
    }
    let classes = train.n_classes().max(query.n_classes());
    let mut train_log = TrajectoryWriter::new(
        "train",
        config.record_dtype,
        classes,
        train.sample_ids().to_vec(),
        train.labels().to_vec(),
    )?;
    let mut query_log = TrajectoryWriter::new(
        "query",
        config.record_dtype,
        classes,
        query.sample_ids().to_vec(),
        query.labels().to_vec(),
    )?;
    let model = run_sgd(train, classes as usize, config, |m| {
        train_log.append_snapshot(&losses(m, train)?)?;
        query_log.append_snapshot(&losses(m, query)?)?;
        Ok(())
    })?;
    Ok(TrainOutput {
        model,
        train_trajectory: train_log.to_dataset()?,
        query_trajectory: query_log.to_dataset()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: &[f64], label: u32) -> Sample<'_> {
        Sample { features: x, label }
    }

    #[test]
    fn zero_model_loss_is_ln_c() {
        for c in 2..6 {
            let m = ToyModel::zeros(ModelKind::Softmax, 3, c);
            let loss = loss_of(&m, sample(&[0.3, -1.0, 2.0], 1)).unwrap();
            assert_eq!(loss, (c as f64).ln());
        }
        let m = ToyModel::zeros(ModelKind::Softmax, 1, 2);
        assert!((loss_of(&m, sample(&[5.0], 0)).unwrap() - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn loss_by_hand() {
        // logits (1, 0, 0) through the bias
        let mut m = ToyModel::zeros(ModelKind::Softmax, 2, 3);
        m.params_mut()[6] = 1.0;
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        let loss = loss_of(&m, sample(&[0.4, 0.1], 0)).unwrap();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn loss_stable_for_huge_logits() {
        let mut m = ToyModel::zeros(ModelKind::Softmax, 1, 2);
        m.params_mut()[0] = 1e4;
        let loss = loss_of(&m, sample(&[1e3], 1)).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 1e7).abs() < 1.0);
        assert_eq!(loss_of(&m, sample(&[1e3], 0)).unwrap(), 0.0);
    }

    #[test]
    fn predict_ties_to_lowest() {
        let mut m = ToyModel::zeros(ModelKind::Softmax, 1, 3);
        assert_eq!(predict(&m, &[1.0]).unwrap(), 0);
        m.params_mut()[3..6].copy_from_slice(&[2.0, 1.0, 0.0]);
        assert_eq!(predict(&m, &[0.0]).unwrap(), 0);
        m.params_mut()[3..6].copy_from_slice(&[0.0, 1.0, 1.0]);
        assert_eq!(predict(&m, &[0.0]).unwrap(), 1);
    }

    #[test]
    fn dimension_mismatch() {
        let m = ToyModel::zeros(ModelKind::Softmax, 2, 2);
        assert!(matches!(
            loss_of(&m, sample(&[1.0], 0)).unwrap_err(),
            TrainError::DimensionMismatch { expected: 2, got: 1 }
        ));
        assert!(predict(&m, &[1.0, 2.0, 3.0]).is_err());
        assert!(matches!(
            gradient(&m, &[], 0.0).unwrap_err(),
            TrainError::EmptyBatch
        ));
    }

    #[test]
    fn balanced_batch_zero_bias_gradient() {
        let m = ToyModel::zeros(ModelKind::Softmax, 2, 2);
        let x = [1.0, -0.5];
        let g = gradient(&m, &[sample(&x, 0), sample(&x, 1)], 0.0).unwrap();
        assert_eq!(&g[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn decay_only_gradient() {
        let mut m = ToyModel::init(ModelKind::Mlp { hidden: 3 }, 2, 2, 1.0, 5);
        m.params_mut()[0] = 0.25;
        let x = [0.3, -0.7];
        let batch = [sample(&x, 0)];
        let plain = gradient(&m, &batch, 0.0).unwrap();
        let decayed = gradient(&m, &batch, 0.5).unwrap();
        let mask = m.weight_mask();
        for i in 0..m.param_count() {
            let expect = if mask[i] { 0.5 * m.params()[i] } else { 0.0 };
            assert!((decayed[i] - plain[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_both_kinds() {
        let x = [0.7, -1.2, 0.4];
        let soft = ToyModel::init(ModelKind::Softmax, 3, 4, 1.0, 1);
        assert!(grad_check(&soft, sample(&x, 2), 1e-5).unwrap() < 1e-4);
        let mlp = ToyModel::init(ModelKind::Mlp { hidden: 8 }, 3, 4, 1.0, 2);
        assert!(grad_check(&mlp, sample(&x, 1), 1e-5).unwrap() < 1e-4);
        let err = grad_check(&mlp, sample(&x, 1), 1.0).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn param_counts() {
        assert_eq!(ToyModel::zeros(ModelKind::Softmax, 10, 3).param_count(), 33);
        assert_eq!(
            ToyModel::zeros(ModelKind::Mlp { hidden: 8 }, 10, 3).param_count(),
            8 * 10 + 8 + 3 * 8 + 3
        );
    }

    #[test]
    fn config_validation() {
        for c in [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                model: ModelKind::Mlp { hidden: 0 },
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
