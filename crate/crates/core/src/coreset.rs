//! Top-k coreset selection from per-sample scores, with an optional
//! per-class quota, and the JSON manifest that records the result.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ltc::{rank_desc, LtcScores};
use crate::trajectory::TrajectoryDataset;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CoresetError {
    #[error("k = {k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("{labels} labels for {n} scored samples")]
    LabelCount { labels: usize, n: usize },
    #[error("label {label} of sample {id} is not below class count {classes}")]
    LabelOutOfRange { id: u64, label: u32, classes: u32 },
    #[error("class count must be positive")]
    NoClasses,
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("digest mismatch: manifest was built from {manifest}, dataset is {dataset}")]
    DigestMismatch { manifest: String, dataset: String },
    #[error("malformed manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scores csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    GlobalTopK,
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSample {
    pub id: u64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetManifest {
    pub version: u32,
    pub policy: SelectionPolicy,
    pub k: usize,
    /// Selected samples, best score first.
    pub selected: Vec<SelectedSample>,
    pub per_class_count: BTreeMap<u32, usize>,
    pub warnings: Vec<String>,
    pub source_digest: String,
}

impl CoresetManifest {
    pub fn selected_ids(&self) -> Vec<u64> {
        self.selected.iter().map(|s| s.id).collect()
    }

    /// Ties the manifest to the trajectory dataset the scores came from.
    pub fn bind_source(&mut self, dataset: &TrajectoryDataset) {
        self.source_digest = dataset.digest();
    }

    pub fn check(&self) -> Result<(), CoresetError> {
        if self.version != MANIFEST_VERSION {
            return Err(CoresetError::Invalid(format!(
                "unsupported version {}",
                self.version
            )));
        }
        if self.k == 0 {
            return Err(CoresetError::Invalid("k must be at least 1".into()));
        }
        if self.selected.len() != self.k {
            return Err(CoresetError::Invalid(format!(
                "k is {} but {} samples are listed",
                self.k,
                self.selected.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.k);
        for s in &self.selected {
            if !seen.insert(s.id) {
                return Err(CoresetError::Invalid(format!("duplicate id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Canonical JSON text: sorted keys, two-space indent, trailing newline.
    pub fn to_json(&self) -> Result<String, CoresetError> {
        self.check()?;
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }
}

fn scores_digest(scores: &LtcScores) -> String {
    let mut h = crc32fast::Hasher::new();
    for (id, s) in scores.train_ids.iter().zip(&scores.scores) {
        h.update(&id.to_le_bytes());
        h.update(&s.to_bits().to_le_bytes());
    }
    format!("crc32:{:08x}", h.finalize())
}

fn check_k(k: usize, n: usize) -> Result<(), CoresetError> {
    if k == 0 || k > n {
        return Err(CoresetError::KOutOfRange { k, n });
    }
    Ok(())
}

fn check_labels(scores: &LtcScores, labels: &[u32], classes: Option<u32>) -> Result<(), CoresetError> {
    if labels.len() != scores.len() {
        return Err(CoresetError::LabelCount {
            labels: labels.len(),
            n: scores.len(),
        });
    }
    if let Some(c) = classes {
        if let Some(i) = labels.iter().position(|&l| l >= c) {
            return Err(CoresetError::LabelOutOfRange {
                id: scores.train_ids[i],
                label: labels[i],
                classes: c,
            });
        }
    }
    Ok(())
}

fn build(
    scores: &LtcScores,
    labels: Option<&[u32]>,
    chosen: &[usize],
    policy: SelectionPolicy,
    warnings: Vec<String>,
) -> CoresetManifest {
    let mut per_class_count = BTreeMap::new();
    let selected = chosen
        .iter()
        .map(|&i| {
            let label = labels.map(|l| l[i]);
            if let Some(l) = label {
                *per_class_count.entry(l).or_insert(0) += 1;
            }
            SelectedSample {
                id: scores.train_ids[i],
                score: scores.scores[i],
                label,
            }
        })
        .collect();
    CoresetManifest {
        version: MANIFEST_VERSION,
        policy,
        k: chosen.len(),
        selected,
        per_class_count,
        warnings,
        source_digest: scores_digest(scores),
    }
}

/// The `k` highest-scoring samples; ties go to the smaller id.
pub fn select_top_k(
    scores: &LtcScores,
    labels: Option<&[u32]>,
    k: usize,
) -> Result<CoresetManifest, CoresetError> {
    check_k(k, scores.len())?;
    if let Some(l) = labels {
        check_labels(scores, l, None)?;
    }
    let order = rank_desc(&scores.train_ids, &scores.scores);
    Ok(build(
        scores,
        labels,
        &order[..k],
        SelectionPolicy::GlobalTopK,
        Vec::new(),
    ))
}

/// Top-k under per-class quotas.
///
/// Every class gets `k / classes` slots filled by its best candidates. The
/// `k % classes` leftover slots go, one each, to the classes whose best
/// not-yet-selected candidate scores highest. Slots a class cannot fill
/// fall through to the best remaining candidates of any class, and the
/// manifest carries a warning.
pub fn select_class_balanced(
    scores: &LtcScores,
    labels: &[u32],
    k: usize,
    classes: u32,
) -> Result<CoresetManifest, CoresetError> {
    if classes == 0 {
        return Err(CoresetError::NoClasses);
    }
    check_k(k, scores.len())?;
    check_labels(scores, labels, Some(classes))?;

    let order = rank_desc(&scores.train_ids, &scores.scores);
    let c = classes as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &i in &order {
        members[labels[i] as usize].push(i);
    }

    let quota = k / c;
    let mut taken: Vec<usize> = members.iter().map(|m| m.len().min(quota)).collect();
    let mut warnings = Vec::new();
    let mut shortfall = 0;
    for (class, m) in members.iter().enumerate() {
        if m.len() < quota {
            shortfall += quota - m.len();
            warnings.push(format!(
                "class {class} has {} candidates, below its quota of {quota}",
                m.len()
            ));
        }
    }

    let remainder = k % c;
    let mut open: Vec<usize> = (0..c).filter(|&cl| taken[cl] < members[cl].len()).collect();
    open.sort_by(|&a, &b| {
        let ia = members[a][taken[a]];
        let ib = members[b][taken[b]];
        scores.scores[ib]
            .total_cmp(&scores.scores[ia])
            .then(scores.train_ids[ia].cmp(&scores.train_ids[ib]))
    });
    let placed = remainder.min(open.len());
    for &cl in &open[..placed] {
        taken[cl] += 1;
    }
    shortfall += remainder - placed;

    let mut chosen = vec![false; scores.len()];
    for (cl, m) in members.iter().enumerate() {
        for &i in &m[..taken[cl]] {
            chosen[i] = true;
        }
    }
    if shortfall > 0 {
        warnings.push(format!(
            "{shortfall} slots filled from the best remaining candidates of any class"
        ));
        for &i in &order {
            if shortfall == 0 {
                break;
            }
            if !chosen[i] {
                chosen[i] = true;
                shortfall -= 1;
            }
        }
    }

    let picked: Vec<usize> = order.into_iter().filter(|&i| chosen[i]).collect();
    Ok(build(
        scores,
        Some(labels),
        &picked,
        SelectionPolicy::ClassBalanced,
        warnings,
    ))
}

/// Scores CSV with header `id,label,score`, one row per training sample.
pub fn scores_to_csv(scores: &LtcScores, labels: &[u32]) -> Result<String, CoresetError> {
    check_labels(scores, labels, None)?;
    let mut out = String::from("id,label,score\n");
    for ((id, label), score) in scores.train_ids.iter().zip(labels).zip(&scores.scores) {
        out.push_str(&format!("{id},{label},{score}\n"));
    }
    Ok(out)
}

/// Parses [`scores_to_csv`] output back into scores and labels.
pub fn scores_from_csv(text: &str) -> Result<(LtcScores, Vec<u32>), CoresetError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "id,label,score" => {}
        _ => {
            return Err(CoresetError::Csv {
                line: 1,
                message: "header must be id,label,score".into(),
            })
        }
    }
    let mut scores = LtcScores {
        train_ids: Vec::new(),
        scores: Vec::new(),
    };
    let mut labels = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let err = |message: String| CoresetError::Csv { line: i + 1, message };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", f.len())));
        }
        let id: u64 = f[0].parse().map_err(|e| err(format!("id: {e}")))?;
        if !seen.insert(id) {
            return Err(err(format!("duplicate id {id}")));
        }
        let score: f64 = f[2].parse().map_err(|e| err(format!("score: {e}")))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        scores.train_ids.push(id);
        labels.push(f[1].parse().map_err(|e| err(format!("label: {e}")))?);
        scores.scores.push(score);
    }
    Ok((scores, labels))
}

pub fn export_manifest<W: Write>(manifest: &CoresetManifest, mut sink: W) -> Result<usize, CoresetError> {
    let text = manifest.to_json()?;
    sink.write_all(text.as_bytes())?;
    sink.flush()?;
    Ok(text.len())
}

/// Parses a manifest, optionally checking that it was built from `dataset`.
pub fn load_manifest<R: Read>(
    mut source: R,
    dataset: Option<&TrajectoryDataset>,
) -> Result<CoresetManifest, CoresetError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let manifest: CoresetManifest = serde_json::from_str(&text)?;
    manifest.check()?;
    if let Some(d) = dataset {
        let digest = d.digest();
        if digest != manifest.source_digest {
            return Err(CoresetError::DigestMismatch {
                manifest: manifest.source_digest,
                dataset: digest,
            });
        }
    }
    Ok(manifest)
}
