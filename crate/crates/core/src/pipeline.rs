//! One-shot coreset selection: synthesize data, train with loss logging,
//! compute LTC, select.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::coreset::{self, CoresetManifest, SelectionPolicy};
use crate::data::{make_synthetic, LabeledDataset, SyntheticSpec};
use crate::kv;
use crate::ltc::{ltc_avg, ltc_matrix, LtcMatrix, LtcScores};
use crate::ltcm;
use crate::trainer::{train_with_logging, ModelKind, TrainConfig};
use crate::trajectory::{compute_deltas, Dtype, TrajectoryDataset};
use crate::util::{crc_digest as crc, derive_seed, framed_digest};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration, including out-of-range values.
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub classes: u32,
    pub per_class: usize,
    pub dims: usize,
    pub cluster_spread: f64,
    pub label_noise: f64,
    /// Clean query samples per class.
    pub query_per_class: usize,
    pub train: TrainConfig,
    pub k: usize,
    pub policy: SelectionPolicy,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 100,
            dims: 10,
            cluster_spread: 0.5,
            label_noise: 0.1,
            query_per_class: 20,
            train: TrainConfig::default(),
            k: 30,
            policy: SelectionPolicy::ClassBalanced,
            seed: 0,
            workers: 1,
        }
    }
}

pub const CONFIG_KEYS: [&str; 19] = [
    "classes",
    "per_class",
    "dims",
    "cluster_spread",
    "label_noise",
    "query_per_class",
    "model",
    "hidden",
    "learning_rate",
    "epochs",
    "batch_size",
    "weight_init_scale",
    "weight_decay",
    "record_dtype",
    "k",
    "policy",
    "seed",
    "workers",
    "train_seed",
];

impl PipelineConfig {
    pub fn n_train(&self) -> usize {
        self.classes as usize * self.per_class
    }

    /// Sets one key. Recognized keys are [`CONFIG_KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
            value
                .parse()
                .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "classes" => self.classes = num(key, value)?,
            "per_class" => self.per_class = num(key, value)?,
            "dims" => self.dims = num(key, value)?,
            "cluster_spread" => self.cluster_spread = num(key, value)?,
            "label_noise" => self.label_noise = num(key, value)?,
            "query_per_class" => self.query_per_class = num(key, value)?,
            "model" => {
                self.train.model = match value {
                    "softmax" => ModelKind::Softmax,
                    "mlp" => ModelKind::Mlp {
                        hidden: match self.train.model {
                            ModelKind::Mlp { hidden } => hidden,
                            ModelKind::Softmax => 16,
                        },
                    },
                    _ => return Err(PipelineError::Config(format!("model: unknown kind {value:?}"))),
                }
            }
            "hidden" => {
                self.train.model = ModelKind::Mlp {
                    hidden: num(key, value)?,
                }
            }
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "weight_init_scale" => self.train.weight_init_scale = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "record_dtype" => {
                self.train.record_dtype = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(PipelineError::Config(format!("record_dtype: {value:?}"))),
                }
            }
            "k" => self.k = num(key, value)?,
            "policy" => {
                self.policy = match value {
                    "global" | "global-top-k" => SelectionPolicy::GlobalTopK,
                    "class-balanced" => SelectionPolicy::ClassBalanced,
                    _ => return Err(PipelineError::Config(format!("policy: unknown {value:?}"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "train_seed" => self.train.seed = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a `key = value` file over the defaults.
    pub fn from_kv(text: &str) -> Result<Self, PipelineError> {
        let mut config = Self::default();
        let entries = kv::parse(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        // `model` before `hidden` regardless of file order
        let mut entries = entries;
        entries.sort_by_key(|e| (e.key != "model", e.line));
        for e in entries {
            config
                .set(&e.key, &e.value)
                .map_err(|err| PipelineError::Config(format!("line {}: {err}", e.line)))?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let n = self.n_train();
        if self.k == 0 || self.k > n {
            return Err(PipelineError::Config(format!(
                "k = {} out of range 1..={n}",
                self.k
            )));
        }
        if self.query_per_class == 0 {
            return Err(PipelineError::Config("query_per_class must be at least 1".into()));
        }
        self.train
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            per_class: self.per_class,
            dims: self.dims,
            cluster_spread: self.cluster_spread,
            label_noise_fraction: self.label_noise,
            seed: derive_seed(self.seed, &[1]),
            id_offset: 0,
        }
    }

    /// Clean samples from the same clusters, with ids after the train ids.
    pub fn query_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            per_class: self.query_per_class,
            label_noise_fraction: 0.0,
            seed: derive_seed(self.seed, &[2]),
            id_offset: self.n_train() as u64,
            ..self.train_spec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub n_train: usize,
    pub n_query: usize,
    pub k: usize,
    pub digests: BTreeMap<String, String>,
    pub per_class_count: BTreeMap<u32, usize>,
    pub noisy_in_coreset: usize,
    pub noisy_in_train: usize,
}

impl PipelineSummary {
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("summary serializes");
        serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub train: LabeledDataset,
    pub query: LabeledDataset,
    pub flipped_ids: Vec<u64>,
    pub train_trajectory: TrajectoryDataset,
    pub query_trajectory: TrajectoryDataset,
    pub matrix: LtcMatrix,
    pub scores: LtcScores,
    pub manifest: CoresetManifest,
    pub summary: PipelineSummary,
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    config.validate()?;
    let synth = make_synthetic(&config.train_spec()).map_err(stage("train-toy"))?;
    let query = make_synthetic(&config.query_spec())
        .map_err(stage("train-toy"))?
        .dataset;
    let train = synth.dataset;
    let out = train_with_logging(&train, &query, &config.train).map_err(stage("train-toy"))?;

    let matrix = ltc_matrix(
        &compute_deltas(&out.train_trajectory),
        &compute_deltas(&out.query_trajectory),
        config.workers.max(1),
    )
    .map_err(stage("ltc"))?;
    let scores = ltc_avg(&matrix).map_err(stage("ltc"))?;

    let mut manifest = match config.policy {
        SelectionPolicy::GlobalTopK => coreset::select_top_k(&scores, Some(train.labels()), config.k),
        SelectionPolicy::ClassBalanced => {
            coreset::select_class_balanced(&scores, train.labels(), config.k, train.n_classes())
        }
    }
    .map_err(stage("select"))?;
    manifest.bind_source(&out.train_trajectory);
    let manifest_json = manifest.to_json().map_err(stage("select"))?;
    let scores_csv = coreset::scores_to_csv(&scores, train.labels()).map_err(stage("ltc"))?;

    let flipped: std::collections::HashSet<u64> = synth.flipped_ids.iter().copied().collect();
    let noisy_in_coreset = manifest
        .selected
        .iter()
        .filter(|s| flipped.contains(&s.id))
        .count();
    let digests = BTreeMap::from([
        ("train_csv".to_string(), crc(train.to_csv().as_bytes())),
        ("query_csv".to_string(), crc(query.to_csv().as_bytes())),
        ("train_trajectory".to_string(), out.train_trajectory.digest()),
        ("query_trajectory".to_string(), out.query_trajectory.digest()),
        ("ltc_matrix".to_string(), framed_digest(&ltcm::encode(&matrix))),
        ("scores_csv".to_string(), crc(scores_csv.as_bytes())),
        ("manifest".to_string(), crc(manifest_json.as_bytes())),
    ]);
    let summary = PipelineSummary {
        n_train: train.len(),
        n_query: query.len(),
        k: config.k,
        digests,
        per_class_count: manifest.per_class_count.clone(),
        noisy_in_coreset,
        noisy_in_train: flipped.len(),
    };
    Ok(PipelineRun {
        train,
        query,
        flipped_ids: synth.flipped_ids,
        train_trajectory: out.train_trajectory,
        query_trajectory: out.query_trajectory,
        matrix,
        scores,
        manifest,
        summary,
    })
}
