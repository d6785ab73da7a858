//! Loss-trajectory correlation (LTC) between training and query samples.
//!
//! The LTC of a (query, train) pair is the Pearson correlation of their
//! per-epoch loss deltas. A positive value means the two samples tend to
//! get easier (or harder) in the same epochs; a negative value means
//! progress on one coincides with regression on the other.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::stats::{self, CorrelationResult, StatsError};
use crate::trajectory::DeltaMatrix;

#[derive(Debug, Error)]
pub enum LtcError {
    #[error("snapshot count mismatch: train has {train} deltas per sample, query has {query}")]
    SnapshotMismatch { train: usize, query: usize },
    #[error("need at least 2 loss deltas (3 snapshots) to correlate, got {0}")]
    TooFewDeltas(usize),
    #[error("worker count must be positive")]
    ZeroWorkers,
    #[error("matrix has no query rows")]
    NoQueries,
    #[error("query index {index} out of range for {n_query} queries")]
    QueryOutOfRange { index: usize, n_query: usize },
    #[error("no training sample has class {0}")]
    EmptyClass(u32),
    #[error("labels cover {labels} samples but the matrix has {n_train}")]
    LabelCount { labels: usize, n_train: usize },
    #[error("count must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

/// LTC of one training trajectory against one query trajectory.
pub fn ltc_pair(train_deltas: &[f64], query_deltas: &[f64]) -> Result<CorrelationResult, LtcError> {
    if train_deltas.len() != query_deltas.len() {
        return Err(LtcError::SnapshotMismatch {
            train: train_deltas.len(),
            query: query_deltas.len(),
        });
    }
    if train_deltas.len() < 2 {
        return Err(LtcError::TooFewDeltas(train_deltas.len()));
    }
    Ok(stats::pearson(train_deltas, query_deltas)?)
}

/// Query-by-train LTC values, row-major (`values[q * n_train + m]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LtcMatrix {
    pub(crate) query_ids: Vec<u64>,
    pub(crate) train_ids: Vec<u64>,
    pub(crate) values: Vec<f64>,
    pub(crate) degenerate: Vec<bool>,
}

impl LtcMatrix {
    /// Assembles a matrix from raw parts; degenerate entries are forced to 0.
    pub fn from_parts(
        query_ids: Vec<u64>,
        train_ids: Vec<u64>,
        mut values: Vec<f64>,
        degenerate: Vec<bool>,
    ) -> Option<Self> {
        let cells = query_ids.len().checked_mul(train_ids.len())?;
        if values.len() != cells || degenerate.len() != cells {
            return None;
        }
        for (v, &d) in values.iter_mut().zip(&degenerate) {
            if d {
                *v = 0.0;
            }
        }
        Some(Self {
            query_ids,
            train_ids,
            values,
            degenerate,
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn degenerate_mask(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn value(&self, q: usize, m: usize) -> f64 {
        self.values[q * self.n_train() + m]
    }

    pub fn is_degenerate(&self, q: usize, m: usize) -> bool {
        self.degenerate[q * self.n_train() + m]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let n = self.n_train();
        &self.values[q * n..(q + 1) * n]
    }

    pub fn query_index(&self, id: u64) -> Option<usize> {
        self.query_ids.iter().position(|&q| q == id)
    }

    /// Wide CSV: a header of train ids, then one row per query.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id");
        for id in &self.train_ids {
            write!(out, ",{id}").unwrap();
        }
        out.push('\n');
        for (q, id) in self.query_ids.iter().enumerate() {
            write!(out, "{id}").unwrap();
            for v in self.row(q) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Centered delta row with its sum of squares, or `None` when the row has
/// zero variance.
struct Centered {
    values: Vec<f64>,
    sum_sq: f64,
}

fn center(row: &[f64]) -> Option<Centered> {
    if stats::is_constant(row) {
        return None;
    }
    let m = stats::mean(row);
    let values: Vec<f64> = row.iter().map(|v| v - m).collect();
    let sum_sq = values.iter().map(|d| d * d).sum::<f64>();
    (sum_sq != 0.0).then_some(Centered { values, sum_sq })
}

/// Full query-by-train LTC matrix.
///
/// Each row is centered once and every entry is then a dot product of two
/// centered rows, accumulated in the same order as [`stats::pearson`], so
/// entries equal `ltc_pair` exactly. Work is split over query rows; the
/// result does not depend on `worker_count`.
pub fn ltc_matrix(
    train: &DeltaMatrix,
    query: &DeltaMatrix,
    worker_count: usize,
) -> Result<LtcMatrix, LtcError> {
    if train.n_deltas() != query.n_deltas() {
        return Err(LtcError::SnapshotMismatch {
            train: train.n_deltas(),
            query: query.n_deltas(),
        });
    }
    if train.n_deltas() < 2 {
        return Err(LtcError::TooFewDeltas(train.n_deltas()));
    }
    if worker_count == 0 {
        return Err(LtcError::ZeroWorkers);
    }
    for row in train.rows().chain(query.rows()) {
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i).into());
        }
    }

    let n = train.n_samples();
    let q = query.n_samples();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count)
        .build()
        .map_err(|e| LtcError::Pool(e.to_string()))?;

    let (train_c, query_c): (Vec<Option<Centered>>, Vec<Option<Centered>>) = pool.install(|| {
        (
            train
                .rows()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|r| center(r))
                .collect(),
            query
                .rows()
                .collect::<Vec<_>>()
                .par_iter()
                .map(|r| center(r))
                .collect(),
        )
    });

    let mut values = vec![0.0f64; q * n];
    let mut degenerate = vec![false; q * n];
    if n > 0 {
        pool.install(|| {
            values
                .par_chunks_mut(n)
                .zip(degenerate.par_chunks_mut(n))
                .zip(query_c.par_iter())
                .for_each(|((out, mask), qc)| {
                    for ((slot, flag), tc) in out.iter_mut().zip(mask.iter_mut()).zip(&train_c) {
                        match (tc, qc) {
                            (Some(tc), Some(qc)) => {
                                let mut dot = 0.0;
                                for (a, b) in tc.values.iter().zip(&qc.values) {
                                    dot += a * b;
                                }
                                *slot = (dot / (tc.sum_sq * qc.sum_sq).sqrt()).clamp(-1.0, 1.0);
                            }
                            _ => {
                                *slot = 0.0;
                                *flag = true;
                            }
                        }
                    }
                });
        });
    }

    Ok(LtcMatrix {
        query_ids: query.sample_ids().to_vec(),
        train_ids: train.sample_ids().to_vec(),
        values,
        degenerate,
    })
}

/// Mean LTC of each training sample over all queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcScores {
    pub train_ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl LtcScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Column means of the LTC matrix. Degenerate entries count as 0.
pub fn ltc_avg(matrix: &LtcMatrix) -> Result<LtcScores, LtcError> {
    let q = matrix.n_query();
    if q == 0 {
        return Err(LtcError::NoQueries);
    }
    let n = matrix.n_train();
    let mut sums = vec![0.0f64; n];
    for row in matrix.values.chunks_exact(n.max(1)).take(q) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(LtcScores {
        train_ids: matrix.train_ids.clone(),
        scores: sums.into_iter().map(|s| s / q as f64).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    MostPositive,
    MostNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Influencer {
    pub train_id: u64,
    pub train_index: usize,
    pub value: f64,
}

/// The `count` training samples with the most extreme LTC for one query,
/// optionally restricted to a single class. Ties go to the smaller id.
pub fn top_influencers(
    matrix: &LtcMatrix,
    query_index: usize,
    train_labels: &[u32],
    class_filter: Option<u32>,
    count: usize,
    direction: Direction,
) -> Result<Vec<Influencer>, LtcError> {
    if query_index >= matrix.n_query() {
        return Err(LtcError::QueryOutOfRange {
            index: query_index,
            n_query: matrix.n_query(),
        });
    }
    if count == 0 {
        return Err(LtcError::ZeroCount);
    }
    if class_filter.is_some() && train_labels.len() != matrix.n_train() {
        return Err(LtcError::LabelCount {
            labels: train_labels.len(),
            n_train: matrix.n_train(),
        });
    }
    let row = matrix.row(query_index);
    let mut candidates: Vec<Influencer> = (0..matrix.n_train())
        .filter(|&m| class_filter.is_none_or(|c| train_labels[m] == c))
        .map(|m| Influencer {
            train_id: matrix.train_ids[m],
            train_index: m,
            value: row[m],
        })
        .collect();
    if let (Some(c), true) = (class_filter, candidates.is_empty()) {
        return Err(LtcError::EmptyClass(c));
    }
    candidates.sort_by(|a, b| {
        let by_value = match direction {
            Direction::MostPositive => b.value.total_cmp(&a.value),
            Direction::MostNegative => a.value.total_cmp(&b.value),
        };
        by_value.then(a.train_id.cmp(&b.train_id))
    });
    candidates.truncate(count);
    Ok(candidates)
}

/// Orders indices by descending score, ascending id on ties.
pub(crate) fn rank_desc(ids: &[u64], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    order
}
