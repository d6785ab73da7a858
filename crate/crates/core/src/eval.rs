//! Attribution quality metrics: the linear datamodeling score (LDS) and
//! prediction brittleness under removal of top-ranked training samples.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::ltc::{rank_desc, LtcMatrix};
use crate::stats;
use crate::trainer::{self, Sample, TrainConfig, TrainError};
use crate::util::{ceil_fraction, derive_seed};

const SUBSET_STREAM: u64 = 0x5355_4253;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown train id {0}")]
    UnknownId(u64),
    #[error("attribution csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

/// Attribution scores `tau(query, train)`, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    query_ids: Vec<u64>,
    train_ids: Vec<u64>,
    values: Vec<f64>,
}

impl AttributionMatrix {
    pub fn new(query_ids: Vec<u64>, train_ids: Vec<u64>, values: Vec<f64>) -> Result<Self, EvalError> {
        if values.len() != query_ids.len() * train_ids.len() {
            return Err(EvalError::DimensionMismatch(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                query_ids.len(),
                train_ids.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::DimensionMismatch(format!("non-finite entry at {i}")));
        }
        Ok(Self {
            query_ids,
            train_ids,
            values,
        })
    }

    pub fn n_query(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_train(&self) -> usize {
        self.train_ids.len()
    }

    pub fn query_ids(&self) -> &[u64] {
        &self.query_ids
    }

    pub fn train_ids(&self) -> &[u64] {
        &self.train_ids
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.n_train();
        &self.values[q * n..(q + 1) * n]
    }

    /// Same matrix with every entry negated.
    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    /// Parses the wide CSV written by [`LtcMatrix::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EvalError::Csv {
            line: 1,
            message: "empty file".into(),
        })?;
        let mut cols = header.split(',').map(str::trim);
        if cols.next() != Some("query_id") {
            return Err(EvalError::Csv {
                line: 1,
                message: "header must start with query_id".into(),
            });
        }
        let train_ids = cols
            .map(|c| c.parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Csv {
                line: 1,
                message: format!("train id: {e}"),
            })?;
        let (mut query_ids, mut values) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            let err = |message: String| EvalError::Csv { line: i + 1, message };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != train_ids.len() + 1 {
                return Err(err(format!(
                    "expected {} fields, got {}",
                    train_ids.len() + 1,
                    fields.len()
                )));
            }
            query_ids.push(
                fields[0]
                    .parse::<u64>()
                    .map_err(|e| err(format!("query id: {e}")))?,
            );
            for f in &fields[1..] {
                values.push(f.parse::<f64>().map_err(|e| err(format!("value: {e}")))?);
            }
        }
        Self::new(query_ids, train_ids, values)
    }
}

impl From<&LtcMatrix> for AttributionMatrix {
    fn from(m: &LtcMatrix) -> Self {
        Self {
            query_ids: m.query_ids().to_vec(),
            train_ids: m.train_ids().to_vec(),
            values: m.values().to_vec(),
        }
    }
}

/// Sum of `row` over the training samples in `subset` (given by id).
pub fn group_attribution(row: &[f64], train_ids: &[u64], subset: &[u64]) -> Result<f64, EvalError> {
    let pos: HashMap<u64, usize> = train_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut sum = 0.0;
    for id in subset {
        let &i = pos.get(id).ok_or(EvalError::UnknownId(*id))?;
        sum += row[i];
    }
    Ok(sum)
}

fn group_attribution_at(row: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&i| row[i]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurable {
    /// 1 when the query is classified correctly, else 0.
    #[default]
    QueryCorrectness,
    NegativeQueryLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsConfig {
    pub n_subsets: usize,
    pub sampling_ratio: f64,
    pub retrains_per_subset: usize,
    pub seed: u64,
    pub measurable: Measurable,
    /// Upper bound on concurrent retraining jobs; does not affect results.
    #[serde(skip)]
    pub workers: usize,
}

impl LdsConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if self.n_subsets < 2 {
            return Err(EvalError::InvalidConfig("need at least 2 subsets".into()));
        }
        if !(self.sampling_ratio > 0.0 && self.sampling_ratio <= 1.0) {
            return Err(EvalError::InvalidConfig(
                "sampling_ratio must be in (0, 1]".into(),
            ));
        }
        if self.retrains_per_subset == 0 {
            return Err(EvalError::InvalidConfig(
                "need at least 1 retrain per subset".into(),
            ));
        }
        Ok(())
    }

    pub fn subset_size(&self, n_train: usize) -> usize {
        ceil_fraction(self.sampling_ratio, n_train as f64) as usize
    }
}

/// Source of the measured quantity for LDS: trains on a subset of the
/// training set and reports one outcome per query.
pub trait OutcomeOracle: Sync {
    fn outcomes(&self, subset: &[usize], seed: u64) -> Result<Vec<f64>, EvalError>;
}

/// Retrains the toy model on each subset.
pub struct ToyOutcomes<'a> {
    pub train: &'a LabeledDataset,
    pub query: &'a LabeledDataset,
    pub config: &'a TrainConfig,
    pub measurable: Measurable,
}

impl OutcomeOracle for ToyOutcomes<'_> {
    fn outcomes(&self, subset: &[usize], seed: u64) -> Result<Vec<f64>, EvalError> {
        let classes = self.train.n_classes().max(self.query.n_classes()) as usize;
        let model = trainer::train(&self.train.subset(subset), classes, &self.config.with_seed(seed))?;
        (0..self.query.len())
            .map(|q| {
                let sample = Sample {
                    features: self.query.features(q),
                    label: self.query.labels()[q],
                };
                Ok(match self.measurable {
                    Measurable::QueryCorrectness => {
                        let hit = trainer::predict(&model, sample.features)? == sample.label;
                        if hit {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Measurable::NegativeQueryLoss => -trainer::loss_of(&model, sample)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLds {
    pub query_id: u64,
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub per_query: Vec<QueryLds>,
    /// Mean over non-degenerate queries; `None` when every query is degenerate.
    pub mean_lds: Option<f64>,
    pub n_degenerate: usize,
    pub subset_size: usize,
    pub retrains_per_subset: usize,
    pub subsets: Vec<Vec<u64>>,
}

impl LdsReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }
}

fn sorted_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("report serializes");
    serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))
}

/// Draws `count` subsets of `size` distinct indices from `0..n`, each sorted.
pub fn sample_subsets(n: usize, size: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUBSET_STREAM]));
    (0..count)
        .map(|_| {
            let mut s = index::sample(&mut rng, n, size).into_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

/// LDS of every query row of `attr` against outcomes from `oracle`.
///
/// For subset `j` and retrain `r` the oracle is called with seed
/// `derive_seed(config.seed, [j, r])`. Per query, the LDS is the Spearman
/// correlation across subsets of the retrain-averaged outcome and the
/// group attribution of the subset.
pub fn run_lds_with<O: OutcomeOracle>(
    oracle: &O,
    attr: &AttributionMatrix,
    config: &LdsConfig,
) -> Result<LdsReport, EvalError> {
    config.validate()?;
    let n = attr.n_train();
    let size = config.subset_size(n);
    if size == 0 {
        return Err(EvalError::InvalidConfig("subset size rounds to 0".into()));
    }
    let subsets = sample_subsets(n, size, config.n_subsets, config.seed);
    let jobs: Vec<(usize, usize)> = (0..config.n_subsets)
        .flat_map(|j| (0..config.retrains_per_subset).map(move |r| (j, r)))
        .collect();
    let results: Vec<Vec<f64>> = pool(config.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(j, r)| oracle.outcomes(&subsets[j], derive_seed(config.seed, &[j as u64, r as u64])))
            .collect::<Result<_, _>>()
    })?;
    let q_count = attr.n_query();
    if let Some(bad) = results.iter().find(|o| o.len() != q_count) {
        return Err(EvalError::DimensionMismatch(format!(
            "oracle returned {} outcomes for {} queries",
            bad.len(),
            q_count
        )));
    }

    let r_count = config.retrains_per_subset;
    let mut per_query = Vec::with_capacity(q_count);
    #[allow(clippy::needless_range_loop)]
    for q in 0..q_count {
        let outcome: Vec<f64> = (0..config.n_subsets)
            .map(|j| {
                let sum: f64 = (0..r_count).map(|r| results[j * r_count + r][q]).sum();
                sum / r_count as f64
            })
            .collect();
        let group: Vec<f64> = subsets
            .iter()
            .map(|s| group_attribution_at(attr.row(q), s))
            .collect();
        let rho =
            stats::spearman(&outcome, &group).map_err(|e| EvalError::DimensionMismatch(e.to_string()))?;
        per_query.push(QueryLds {
            query_id: attr.query_ids[q],
            value: rho.value,
            degenerate: rho.degenerate,
        });
    }
    let valid: Vec<f64> = per_query
        .iter()
        .filter(|p| !p.degenerate)
        .map(|p| p.value)
        .collect();
    Ok(LdsReport {
        mean_lds: (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64),
        n_degenerate: q_count - valid.len(),
        per_query,
        subset_size: size,
        retrains_per_subset: r_count,
        subsets: subsets
            .iter()
            .map(|s| s.iter().map(|&i| attr.train_ids[i]).collect())
            .collect(),
    })
}

/// LDS with the toy trainer as the outcome source.
pub fn run_lds(
    train: &LabeledDataset,
    query: &LabeledDataset,
    attr: &AttributionMatrix,
    tconfig: &TrainConfig,
    lconfig: &LdsConfig,
) -> Result<LdsReport, EvalError> {
    if attr.train_ids() != train.sample_ids() || attr.query_ids() != query.sample_ids() {
        return Err(EvalError::DimensionMismatch(
            "attribution ids do not match the train/query datasets".into(),
        ));
    }
    tconfig.validate()?;
    let oracle = ToyOutcomes {
        train,
        query,
        config: tconfig,
        measurable: lconfig.measurable,
    };
    run_lds_with(&oracle, attr, lconfig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipBasis {
    /// Prediction differs from the full-data model's prediction.
    #[default]
    Reference,
    /// Query was classified correctly by the full-data model and is not anymore.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrittlenessConfig {
    pub k_values: Vec<usize>,
    pub retrains: usize,
    pub seed: u64,
    pub basis: FlipBasis,
    #[serde(skip)]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrittlenessReport {
    pub k_values: Vec<usize>,
    /// Mean over retrains of the flipped fraction of queries, per k.
    pub flip_fraction: Vec<f64>,
    /// Sample standard deviation over retrains, per k (0 for one retrain).
    pub flip_std: Vec<f64>,
    /// `per_retrain[i][r]`: flipped fraction for `k_values[i]`, retrain `r`.
    pub per_retrain: Vec<Vec<f64>>,
    pub retrains: usize,
    pub basis: FlipBasis,
    /// Whether each query used its own removal ranking.
    pub per_query: bool,
    pub reference_digest: String,
}

impl BrittlenessReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }
}

/// Removes the top-k training samples by `scores` (ties to smaller id),
/// retrains, and measures how many query predictions change.
///
/// Retrain `r` uses seed `derive_seed(seed, [r])` and is compared with a
/// full-data model trained with that same seed, so that `k = 0` reproduces
/// the reference run exactly.
pub fn run_brittleness(
    train: &LabeledDataset,
    query: &LabeledDataset,
    scores: &[f64],
    tconfig: &TrainConfig,
    config: &BrittlenessConfig,
) -> Result<BrittlenessReport, EvalError> {
    check_scores(scores, train.len())?;
    let order = rank_desc(train.sample_ids(), scores);
    brittleness(train, query, Removal::Shared(order), tconfig, config)
}

/// Like [`run_brittleness`], but each query has its own removal ranking,
/// taken from its row of `attr`, and only that query's prediction is
/// checked after retraining.
pub fn run_brittleness_per_query(
    train: &LabeledDataset,
    query: &LabeledDataset,
    attr: &AttributionMatrix,
    tconfig: &TrainConfig,
    config: &BrittlenessConfig,
) -> Result<BrittlenessReport, EvalError> {
    if attr.train_ids() != train.sample_ids() || attr.query_ids() != query.sample_ids() {
        return Err(EvalError::DimensionMismatch(
            "attribution ids do not match the train/query datasets".into(),
        ));
    }
    let orders = (0..attr.n_query())
        .map(|q| rank_desc(train.sample_ids(), attr.row(q)))
        .collect();
    brittleness(train, query, Removal::PerQuery(orders), tconfig, config)
}

fn check_scores(scores: &[f64], n: usize) -> Result<(), EvalError> {
    if scores.len() != n {
        return Err(EvalError::DimensionMismatch(format!(
            "{} scores for {n} training samples",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::InvalidConfig(format!("non-finite score at {i}")));
    }
    Ok(())
}

enum Removal {
    Shared(Vec<usize>),
    PerQuery(Vec<Vec<usize>>),
}

fn brittleness(
    train: &LabeledDataset,
    query: &LabeledDataset,
    removal: Removal,
    tconfig: &TrainConfig,
    config: &BrittlenessConfig,
) -> Result<BrittlenessReport, EvalError> {
    let n = train.len();
    if let Some(&k) = config.k_values.iter().find(|&&k| k >= n) {
        return Err(EvalError::InvalidConfig(format!("k = {k} must be below N = {n}")));
    }
    if config.retrains == 0 {
        return Err(EvalError::InvalidConfig("need at least 1 retrain".into()));
    }
    if query.is_empty() {
        return Err(EvalError::InvalidConfig("no query samples".into()));
    }
    tconfig.validate()?;
    let classes = train.n_classes().max(query.n_classes()) as usize;
    let seeds: Vec<u64> = (0..config.retrains as u64)
        .map(|r| derive_seed(config.seed, &[r]))
        .collect();

    let fit_without = |removed: &[usize], seed: u64| -> Result<trainer::ToyModel, EvalError> {
        let mut keep = vec![true; n];
        for &i in removed {
            keep[i] = false;
        }
        let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        Ok(trainer::train(
            &train.subset(&kept),
            classes,
            &tconfig.with_seed(seed),
        )?)
    };
    let flipped = |q: usize, pred: u32, reference: u32| match config.basis {
        FlipBasis::Reference => pred != reference,
        FlipBasis::Labels => {
            let label = query.labels()[q];
            reference == label && pred != label
        }
    };

    let pool = pool(config.workers)?;
    let references: Vec<Vec<u32>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| Ok(trainer::predictions(&fit_without(&[], s)?, query)?))
            .collect::<Result<_, EvalError>>()
    })?;

    let (k_count, r_count, q_count) = (config.k_values.len(), config.retrains, query.len());
    // flips[i * r_count + r] counts flipped queries for k_values[i], retrain r
    let flips: Vec<usize> = match &removal {
        Removal::Shared(order) => {
            let jobs: Vec<(usize, usize)> = (0..k_count)
                .flat_map(|i| (0..r_count).map(move |r| (i, r)))
                .collect();
            pool.install(|| {
                jobs.par_iter()
                    .map(|&(i, r)| {
                        let k = config.k_values[i];
                        if k == 0 {
                            return Ok(0);
                        }
                        let preds = trainer::predictions(&fit_without(&order[..k], seeds[r])?, query)?;
                        Ok((0..q_count)
                            .filter(|&q| flipped(q, preds[q], references[r][q]))
                            .count())
                    })
                    .collect::<Result<_, EvalError>>()
            })?
        }
        Removal::PerQuery(orders) => {
            let jobs: Vec<(usize, usize, usize)> = (0..k_count)
                .flat_map(|i| (0..r_count).flat_map(move |r| (0..q_count).map(move |q| (i, r, q))))
                .collect();
            let hits: Vec<bool> = pool.install(|| {
                jobs.par_iter()
                    .map(|&(i, r, q)| {
                        let k = config.k_values[i];
                        if k == 0 {
                            return Ok(false);
                        }
                        let model = fit_without(&orders[q][..k], seeds[r])?;
                        let pred = trainer::predict(&model, query.features(q))?;
                        Ok(flipped(q, pred, references[r][q]))
                    })
                    .collect::<Result<_, EvalError>>()
            })?;
            hits.chunks(q_count)
                .map(|c| c.iter().filter(|&&h| h).count())
                .collect()
        }
    };

    let per_retrain: Vec<Vec<f64>> = flips
        .chunks(r_count)
        .map(|c| c.iter().map(|&f| f as f64 / q_count as f64).collect())
        .collect();
    let flip_fraction: Vec<f64> = per_retrain
        .iter()
        .map(|v| v.iter().sum::<f64>() / r_count as f64)
        .collect();
    let flip_std = per_retrain
        .iter()
        .zip(&flip_fraction)
        .map(|(v, mean)| {
            if r_count < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r_count - 1) as f64).sqrt()
            }
        })
        .collect();
    let mut h = crc32fast::Hasher::new();
    for preds in &references {
        for p in preds {
            h.update(&p.to_le_bytes());
        }
    }
    Ok(BrittlenessReport {
        k_values: config.k_values.clone(),
        flip_fraction,
        flip_std,
        per_retrain,
        retrains: r_count,
        basis: config.basis,
        per_query: matches!(removal, Removal::PerQuery(_)),
        reference_digest: format!("crc32:{:08x}", h.finalize()),
    })
}
