//! Per-sample loss trajectories and the `LTRJ` file format.
//!
//! A trajectory file records, for every sample of one split, the loss at
//! each training snapshot. Snapshot 0 is the model before any update and
//! snapshot `t` is the model at the end of epoch `t`, so a run of `T`
//! epochs yields `T + 1` snapshots and `T` loss deltas.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4  b"LTRJ"
//! version      u16  = 1
//! dtype        u8   0 = f32, 1 = f64
//! reserved     u8   = 0
//! n_samples    u64
//! n_snapshots  u32
//! n_classes    u32
//! tag_len      u16, then tag_len bytes of UTF-8 split tag
//! sample_ids   n_samples x u64
//! labels       n_samples x u32
//! losses       n_samples x n_snapshots, sample-major, in dtype
//! crc32        u32 over every preceding byte
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LTRJ";
pub const FORMAT_VERSION: u16 = 1;

/// Bytes before the split tag.
pub const FIXED_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 + 4 + 4 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Rounds `v` to the nearest value representable in this dtype.
    pub fn narrow(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, expected \"LTRJ\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("reserved header byte must be 0, found {0}")]
    ReservedNonZero(u8),
    #[error("unexpected EOF: {what} needs {needed} bytes, file has {available}")]
    UnexpectedEof {
        what: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(u64),
    #[error("split tag is not valid UTF-8")]
    InvalidTag,
    #[error("split tag is {0} bytes, limit is 65535")]
    TagTooLong(usize),
    #[error("need at least 2 snapshots, got {0}")]
    TooFewSnapshots(usize),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("label out of range: sample {sample} has label {label} but n_classes is {n_classes}")]
    LabelOutOfRange {
        sample: usize,
        label: u32,
        n_classes: u32,
    },
    #[error("non-finite loss (NaN/Inf) at sample {sample}, snapshot {snapshot}")]
    NonFinite { sample: usize, snapshot: usize },
    #[error("length mismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("writer already finalized")]
    Finalized,
}

impl TrajectoryError {
    /// Stable short code used in validation reports.
    pub fn code(&self) -> &'static str {
        match self {
            TrajectoryError::Io(_) => "io",
            TrajectoryError::BadMagic(_) => "bad-magic",
            TrajectoryError::UnsupportedVersion(_) => "unsupported-version",
            TrajectoryError::UnsupportedDtype(_) => "unsupported-dtype",
            TrajectoryError::ReservedNonZero(_) => "reserved-nonzero",
            TrajectoryError::UnexpectedEof { .. } => "unexpected-eof",
            TrajectoryError::TrailingBytes(_) => "trailing-bytes",
            TrajectoryError::InvalidTag => "invalid-tag",
            TrajectoryError::TagTooLong(_) => "tag-too-long",
            TrajectoryError::TooFewSnapshots(_) => "too-few-snapshots",
            TrajectoryError::DuplicateId(_) => "duplicate-id",
            TrajectoryError::LabelOutOfRange { .. } => "label-out-of-range",
            TrajectoryError::NonFinite { .. } => "non-finite-loss",
            TrajectoryError::LengthMismatch { .. } => "length-mismatch",
            TrajectoryError::ChecksumMismatch { .. } => "checksum-mismatch",
            TrajectoryError::Finalized => "finalized",
        }
    }
}

pub type Result<T, E = TrajectoryError> = std::result::Result<T, E>;

/// Loss values of one split across all recorded snapshots.
///
/// Fields are private so that every instance satisfies the format
/// invariants: unique ids, labels below `n_classes`, finite losses and at
/// least two snapshots. Losses are held as `f64` but already rounded to the
/// declared dtype, so a write/read cycle reproduces them bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    split_tag: String,
    dtype: Dtype,
    n_classes: u32,
    n_snapshots: usize,
    sample_ids: Vec<u64>,
    labels: Vec<u32>,
    losses: Vec<f64>,
}

impl TrajectoryDataset {
    /// Builds a dataset from a sample-major `losses` buffer of length
    /// `sample_ids.len() * n_snapshots`.
    pub fn new(
        split_tag: impl Into<String>,
        dtype: Dtype,
        n_classes: u32,
        sample_ids: Vec<u64>,
        labels: Vec<u32>,
        n_snapshots: usize,
        mut losses: Vec<f64>,
    ) -> Result<Self> {
        let split_tag = split_tag.into();
        check_header_fields(&split_tag, n_snapshots)?;
        check_ids_and_labels(&sample_ids, &labels, n_classes)?;
        let expected = sample_ids.len() * n_snapshots;
        if losses.len() != expected {
            return Err(TrajectoryError::LengthMismatch {
                expected,
                got: losses.len(),
            });
        }
        for (i, v) in losses.iter_mut().enumerate() {
            *v = dtype.narrow(*v);
            if !v.is_finite() {
                return Err(TrajectoryError::NonFinite {
                    sample: i / n_snapshots,
                    snapshot: i % n_snapshots,
                });
            }
        }
        Ok(Self {
            split_tag,
            dtype,
            n_classes,
            n_snapshots,
            sample_ids,
            labels,
            losses,
        })
    }

    /// Convenience constructor from one row per sample.
    pub fn from_rows(
        split_tag: impl Into<String>,
        dtype: Dtype,
        n_classes: u32,
        sample_ids: Vec<u64>,
        labels: Vec<u32>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let n_snapshots = rows.first().map_or(0, Vec::len);
        let mut losses = Vec::with_capacity(rows.len() * n_snapshots);
        for row in rows {
            if row.len() != n_snapshots {
                return Err(TrajectoryError::LengthMismatch {
                    expected: n_snapshots,
                    got: row.len(),
                });
            }
            losses.extend_from_slice(row);
        }
        if rows.len() != sample_ids.len() {
            return Err(TrajectoryError::LengthMismatch {
                expected: sample_ids.len(),
                got: rows.len(),
            });
        }
        Self::new(
            split_tag,
            dtype,
            n_classes,
            sample_ids,
            labels,
            n_snapshots,
            losses,
        )
    }

    pub fn format_version(&self) -> u16 {
        FORMAT_VERSION
    }

    pub fn split_tag(&self) -> &str {
        &self.split_tag
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_snapshots(&self) -> usize {
        self.n_snapshots
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

    /// Sample-major loss buffer.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Loss trajectory of sample `m` across all snapshots.
    pub fn trajectory(&self, m: usize) -> &[f64] {
        &self.losses[m * self.n_snapshots..(m + 1) * self.n_snapshots]
    }

    pub fn loss(&self, m: usize, t: usize) -> f64 {
        self.losses[m * self.n_snapshots + t]
    }

    /// Serialized size in bytes, including the checksum trailer.
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN
            + self.split_tag.len()
            + self.n_samples() * (8 + 4)
            + self.losses.len() * self.dtype.width()
            + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        write_dataset(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// The file checksum, as `crc32:xxxxxxxx`.
    pub fn digest(&self) -> String {
        crate::util::framed_digest(&self.to_bytes())
    }
}

fn check_header_fields(split_tag: &str, n_snapshots: usize) -> Result<()> {
    if split_tag.len() > u16::MAX as usize {
        return Err(TrajectoryError::TagTooLong(split_tag.len()));
    }
    if n_snapshots < 2 {
        return Err(TrajectoryError::TooFewSnapshots(n_snapshots));
    }
    if n_snapshots > u32::MAX as usize {
        return Err(TrajectoryError::LengthMismatch {
            expected: u32::MAX as usize,
            got: n_snapshots,
        });
    }
    Ok(())
}

fn check_ids_and_labels(sample_ids: &[u64], labels: &[u32], n_classes: u32) -> Result<()> {
    if labels.len() != sample_ids.len() {
        return Err(TrajectoryError::LengthMismatch {
            expected: sample_ids.len(),
            got: labels.len(),
        });
    }
    let mut seen = HashSet::with_capacity(sample_ids.len());
    for &id in sample_ids {
        if !seen.insert(id) {
            return Err(TrajectoryError::DuplicateId(id));
        }
    }
    for (sample, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(TrajectoryError::LabelOutOfRange {
                sample,
                label,
                n_classes,
            });
        }
    }
    Ok(())
}

/// Writer adapter that feeds every byte through a CRC32 hasher.
struct HashingWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: usize,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: crc32fast::Hasher::new(),
            written: 0,
        }
    }

    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hasher.update(bytes);
        self.written += bytes.len();
        self.inner.write_all(bytes)
    }

    fn finish(mut self) -> std::io::Result<usize> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok(self.written + 4)
    }
}

#[allow(clippy::too_many_arguments)]
fn write_parts<W: Write, F>(
    sink: W,
    split_tag: &str,
    dtype: Dtype,
    n_classes: u32,
    n_snapshots: usize,
    sample_ids: &[u64],
    labels: &[u32],
    loss_at: F,
) -> Result<usize>
where
    F: Fn(usize, usize) -> f64,
{
    let mut w = HashingWriter::new(sink);
    w.put(&MAGIC)?;
    w.put(&FORMAT_VERSION.to_le_bytes())?;
    w.put(&[dtype.code(), 0])?;
    w.put(&(sample_ids.len() as u64).to_le_bytes())?;
    w.put(&(n_snapshots as u32).to_le_bytes())?;
    w.put(&n_classes.to_le_bytes())?;
    w.put(&(split_tag.len() as u16).to_le_bytes())?;
    w.put(split_tag.as_bytes())?;
    for id in sample_ids {
        w.put(&id.to_le_bytes())?;
    }
    for label in labels {
        w.put(&label.to_le_bytes())?;
    }
    let mut row = Vec::with_capacity(n_snapshots * dtype.width());
    for m in 0..sample_ids.len() {
        row.clear();
        for t in 0..n_snapshots {
            let v = loss_at(m, t);
            match dtype {
                Dtype::F32 => row.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => row.extend_from_slice(&v.to_le_bytes()),
            }
        }
        w.put(&row)?;
    }
    Ok(w.finish()?)
}

/// Serializes `dataset` to `sink` and returns the number of bytes written.
pub fn write_dataset<W: Write>(dataset: &TrajectoryDataset, sink: W) -> Result<usize> {
    let s = dataset.n_snapshots;
    write_parts(
        sink,
        &dataset.split_tag,
        dataset.dtype,
        dataset.n_classes,
        s,
        &dataset.sample_ids,
        &dataset.labels,
        |m, t| dataset.losses[m * s + t],
    )
}

pub fn write_file(dataset: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<usize> {
    let file = File::create(path)?;
    write_dataset(dataset, BufWriter::new(file))
}

/// Reads and fully verifies a trajectory file.
///
/// Problems are reported in file order, so a corrupted payload is named
/// before the checksum that it also invalidates.
pub fn read_dataset<R: Read>(mut source: R) -> Result<TrajectoryDataset> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let scan = scan(&bytes);
    match scan.problems.into_iter().next() {
        Some(problem) => Err(problem.error),
        None => Ok(scan.dataset.expect("a clean scan always yields a dataset")),
    }
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    read_dataset(File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: String,
    pub message: String,
    /// Byte offset of the first offending byte, when one exists.
    pub offset: Option<u64>,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            Some(off) => write!(f, "[{}] at byte {}: {}", self.code, off, self.message),
            None => write!(f, "[{}] {}", self.code, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

/// Checks every format rule and reports all violations instead of stopping
/// at the first one.
pub fn validate<R: Read>(mut source: R) -> ValidationReport {
    let mut bytes = Vec::new();
    if let Err(e) = source.read_to_end(&mut bytes) {
        let error = TrajectoryError::Io(e);
        return ValidationReport {
            ok: false,
            issues: vec![Issue {
                code: error.code().to_string(),
                message: error.to_string(),
                offset: None,
            }],
        };
    }
    let issues: Vec<Issue> = scan(&bytes)
        .problems
        .into_iter()
        .map(|p| Issue {
            code: p.error.code().to_string(),
            message: match p.repeats {
                0 => p.error.to_string(),
                n => format!("{} (and {} more)", p.error, n),
            },
            offset: p.offset,
        })
        .collect();
    ValidationReport {
        ok: issues.is_empty(),
        issues,
    }
}

struct Problem {
    error: TrajectoryError,
    offset: Option<u64>,
    /// Further occurrences of the same rule that were folded into this one.
    repeats: usize,
}

struct Scan {
    dataset: Option<TrajectoryDataset>,
    problems: Vec<Problem>,
}

impl Scan {
    fn push(&mut self, error: TrajectoryError, offset: Option<usize>) {
        self.problems.push(Problem {
            error,
            offset: offset.map(|o| o as u64),
            repeats: 0,
        });
    }

    /// Records `error` unless a problem with the same code is already
    /// present, in which case only the repeat counter grows.
    fn push_folded(&mut self, error: TrajectoryError, offset: usize) {
        let code = error.code();
        if let Some(p) = self.problems.iter_mut().find(|p| p.error.code() == code) {
            p.repeats += 1;
        } else {
            self.push(error, Some(offset));
        }
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn eof(what: &'static str, needed: usize, available: usize) -> TrajectoryError {
    TrajectoryError::UnexpectedEof {
        what,
        needed: needed as u64,
        available: available as u64,
    }
}

fn scan(bytes: &[u8]) -> Scan {
    let mut scan = Scan {
        dataset: None,
        problems: Vec::new(),
    };
    let len = bytes.len();
    if len < FIXED_HEADER_LEN {
        if len >= 4 && bytes[..4] != MAGIC {
            scan.push(TrajectoryError::BadMagic(bytes[..4].try_into().unwrap()), Some(0));
        }
        scan.push(eof("header", FIXED_HEADER_LEN, len), Some(len));
        return scan;
    }

    if bytes[..4] != MAGIC {
        scan.push(TrajectoryError::BadMagic(bytes[..4].try_into().unwrap()), Some(0));
    }
    let version = le_u16(bytes, 4);
    if version != FORMAT_VERSION {
        scan.push(TrajectoryError::UnsupportedVersion(version), Some(4));
    }
    let dtype = Dtype::from_code(bytes[6]);
    if dtype.is_none() {
        scan.push(TrajectoryError::UnsupportedDtype(bytes[6]), Some(6));
    }
    if bytes[7] != 0 {
        scan.push(TrajectoryError::ReservedNonZero(bytes[7]), Some(7));
    }
    let n_samples = le_u64(bytes, 8);
    let n_snapshots = le_u32(bytes, 16) as usize;
    let n_classes = le_u32(bytes, 20);
    let tag_len = le_u16(bytes, 24) as usize;
    if n_snapshots < 2 {
        scan.push(TrajectoryError::TooFewSnapshots(n_snapshots), Some(16));
    }

    let tag_start = FIXED_HEADER_LEN;
    if len < tag_start + tag_len {
        scan.push(eof("split tag", tag_start + tag_len, len), Some(len));
        return scan;
    }
    let split_tag = match std::str::from_utf8(&bytes[tag_start..tag_start + tag_len]) {
        Ok(s) => s.to_string(),
        Err(_) => {
            scan.push(TrajectoryError::InvalidTag, Some(tag_start));
            String::new()
        }
    };

    // Without a known dtype the payload size is unknowable; only the
    // checksum can still be checked.
    let Some(dtype) = dtype else {
        if len >= 4 {
            check_crc(&mut scan, bytes, len - 4);
        }
        return scan;
    };

    let ids_start = tag_start + tag_len;
    let sizes = usize::try_from(n_samples).ok().and_then(|n| {
        let ids = n.checked_mul(8)?;
        let labels = n.checked_mul(4)?;
        let losses = n.checked_mul(n_snapshots)?.checked_mul(dtype.width())?;
        let total = ids_start
            .checked_add(ids)?
            .checked_add(labels)?
            .checked_add(losses)?
            .checked_add(4)?;
        Some((n, total))
    });
    let Some((n, total)) = sizes else {
        scan.push(eof("payload", usize::MAX, len), Some(len));
        return scan;
    };
    let labels_start = ids_start + 8 * n;
    let losses_start = labels_start + 4 * n;
    let crc_start = total - 4;

    let mut sample_ids = Vec::new();
    if len >= labels_start {
        sample_ids.reserve(n);
        let mut seen = HashSet::with_capacity(n);
        for m in 0..n {
            let at = ids_start + 8 * m;
            let id = le_u64(bytes, at);
            if !seen.insert(id) {
                scan.push_folded(TrajectoryError::DuplicateId(id), at);
            }
            sample_ids.push(id);
        }
    }
    let mut labels = Vec::new();
    if len >= losses_start {
        labels.reserve(n);
        for m in 0..n {
            let at = labels_start + 4 * m;
            let label = le_u32(bytes, at);
            if label >= n_classes {
                scan.push_folded(
                    TrajectoryError::LabelOutOfRange {
                        sample: m,
                        label,
                        n_classes,
                    },
                    at,
                );
            }
            labels.push(label);
        }
    }
    let mut losses = Vec::new();
    if len >= crc_start {
        losses.reserve(n * n_snapshots);
        let w = dtype.width();
        for (i, chunk) in bytes[losses_start..crc_start].chunks_exact(w).enumerate() {
            let v = match dtype {
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
            };
            if !v.is_finite() {
                scan.push_folded(
                    TrajectoryError::NonFinite {
                        sample: i / n_snapshots,
                        snapshot: i % n_snapshots,
                    },
                    losses_start + i * w,
                );
            }
            losses.push(v);
        }
    }

    if len < total {
        let what = if len < labels_start {
            "sample ids"
        } else if len < losses_start {
            "labels"
        } else if len < crc_start {
            "losses"
        } else {
            "checksum"
        };
        scan.push(eof(what, total, len), Some(len));
        return scan;
    }
    if len > total {
        scan.push(TrajectoryError::TrailingBytes((len - total) as u64), Some(total));
    }
    check_crc(&mut scan, bytes, crc_start);

    if scan.problems.is_empty() {
        scan.dataset = Some(TrajectoryDataset {
            split_tag,
            dtype,
            n_classes,
            n_snapshots,
            sample_ids,
            labels,
            losses,
        });
    }
    scan
}

fn check_crc(scan: &mut Scan, bytes: &[u8], crc_start: usize) {
    let stored = le_u32(bytes, crc_start);
    let computed = crc32fast::hash(&bytes[..crc_start]);
    if stored != computed {
        scan.push(
            TrajectoryError::ChecksumMismatch { stored, computed },
            Some(crc_start),
        );
    }
}

/// Streaming trajectory writer: one call per snapshot as training proceeds.
///
/// The file is sample-major, so snapshots are buffered until
/// [`TrajectoryWriter::finalize`] lays them out. The result is byte-identical
/// to [`write_dataset`] on the assembled matrix.
#[derive(Debug, Clone)]
pub struct TrajectoryWriter {
    split_tag: String,
    dtype: Dtype,
    n_classes: u32,
    sample_ids: Vec<u64>,
    labels: Vec<u32>,
    /// Snapshot-major buffer, already narrowed to `dtype`.
    snapshots: Vec<f64>,
    n_snapshots: usize,
}

impl TrajectoryWriter {
    pub fn new(
        split_tag: impl Into<String>,
        dtype: Dtype,
        n_classes: u32,
        sample_ids: Vec<u64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let split_tag = split_tag.into();
        if split_tag.len() > u16::MAX as usize {
            return Err(TrajectoryError::TagTooLong(split_tag.len()));
        }
        check_ids_and_labels(&sample_ids, &labels, n_classes)?;
        Ok(Self {
            split_tag,
            dtype,
            n_classes,
            sample_ids,
            labels,
            snapshots: Vec::new(),
            n_snapshots: 0,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_snapshots(&self) -> usize {
        self.n_snapshots
    }

    /// Appends one loss per sample. Nothing is recorded if any value is
    /// rejected.
    pub fn append_snapshot(&mut self, epoch_losses: &[f64]) -> Result<&mut Self> {
        if epoch_losses.len() != self.n_samples() {
            return Err(TrajectoryError::LengthMismatch {
                expected: self.n_samples(),
                got: epoch_losses.len(),
            });
        }
        if self.n_snapshots == u32::MAX as usize {
            return Err(TrajectoryError::LengthMismatch {
                expected: u32::MAX as usize,
                got: self.n_snapshots + 1,
            });
        }
        if let Some(sample) = epoch_losses
            .iter()
            .position(|v| !self.dtype.narrow(*v).is_finite())
        {
            return Err(TrajectoryError::NonFinite {
                sample,
                snapshot: self.n_snapshots,
            });
        }
        self.snapshots
            .extend(epoch_losses.iter().map(|&v| self.dtype.narrow(v)));
        self.n_snapshots += 1;
        Ok(self)
    }

    /// Assembles the snapshots recorded so far into a dataset.
    pub fn to_dataset(&self) -> Result<TrajectoryDataset> {
        if self.n_snapshots < 2 {
            return Err(TrajectoryError::TooFewSnapshots(self.n_snapshots));
        }
        let n = self.n_samples();
        let s = self.n_snapshots;
        let mut losses = vec![0.0; n * s];
        for t in 0..s {
            for m in 0..n {
                losses[m * s + t] = self.snapshots[t * n + m];
            }
        }
        Ok(TrajectoryDataset {
            split_tag: self.split_tag.clone(),
            dtype: self.dtype,
            n_classes: self.n_classes,
            n_snapshots: s,
            sample_ids: self.sample_ids.clone(),
            labels: self.labels.clone(),
            losses,
        })
    }

    /// Writes the complete file and consumes the writer.
    pub fn finalize<W: Write>(self, sink: W) -> Result<usize> {
        if self.n_snapshots < 2 {
            return Err(TrajectoryError::TooFewSnapshots(self.n_snapshots));
        }
        let n = self.n_samples();
        write_parts(
            sink,
            &self.split_tag,
            self.dtype,
            self.n_classes,
            self.n_snapshots,
            &self.sample_ids,
            &self.labels,
            |m, t| self.snapshots[t * n + m],
        )
    }
}

/// Epoch-to-epoch loss changes: `deltas[m][t] = loss[m][t+1] - loss[m][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    sample_ids: Vec<u64>,
    n_deltas: usize,
    deltas: Vec<f64>,
}

impl DeltaMatrix {
    /// Wraps precomputed delta rows. Every row must have the same length.
    pub fn from_rows(sample_ids: Vec<u64>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != sample_ids.len() {
            return Err(TrajectoryError::LengthMismatch {
                expected: sample_ids.len(),
                got: rows.len(),
            });
        }
        let n_deltas = rows.first().map_or(0, Vec::len);
        let mut deltas = Vec::with_capacity(rows.len() * n_deltas);
        for row in rows {
            if row.len() != n_deltas {
                return Err(TrajectoryError::LengthMismatch {
                    expected: n_deltas,
                    got: row.len(),
                });
            }
            deltas.extend_from_slice(row);
        }
        Ok(Self {
            sample_ids,
            n_deltas,
            deltas,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_deltas(&self) -> usize {
        self.n_deltas
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.deltas[m * self.n_deltas..(m + 1) * self.n_deltas]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_samples()).map(move |m| self.row(m))
    }

    /// Restricts to the given row indices, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut deltas = Vec::with_capacity(indices.len() * self.n_deltas);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            deltas.extend_from_slice(self.row(i));
            ids.push(self.sample_ids[i]);
        }
        Self {
            sample_ids: ids,
            n_deltas: self.n_deltas,
            deltas,
        }
    }
}

/// Differences consecutive snapshots of every trajectory.
///
/// A dataset always holds at least two snapshots, so at least one delta
/// per sample exists.
pub fn compute_deltas(dataset: &TrajectoryDataset) -> DeltaMatrix {
    let s = dataset.n_snapshots();
    let mut deltas = Vec::with_capacity(dataset.n_samples() * (s - 1));
    for m in 0..dataset.n_samples() {
        deltas.extend(dataset.trajectory(m).windows(2).map(|w| w[1] - w[0]));
    }
    DeltaMatrix {
        sample_ids: dataset.sample_ids().to_vec(),
        n_deltas: s - 1,
        deltas,
    }
}
