//! The `muse` command line. [`run`] parses arguments, dispatches to a
//! subcommand and returns the process exit code:
//!
//! * 0 success
//! * 1 usage error (bad flags, out-of-range settings)
//! * 2 data or validation error (unreadable, corrupt or inconsistent inputs)
//! * 3 internal error

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use muse_core::coreset;
use muse_core::cost::{self, Units, WorkloadParams};
use muse_core::data::{make_synthetic, LabeledDataset};
use muse_core::eval::{self, AttributionMatrix, BrittlenessConfig, FlipBasis, LdsConfig, Measurable};
use muse_core::ltc::{self, Direction, LtcError};
use muse_core::ltcm;
use muse_core::pipeline::{self, PipelineConfig, PipelineError};
use muse_core::trainer::{train_with_logging, ModelKind, TrainConfig};
use muse_core::trajectory::{self, compute_deltas, Dtype};
use muse_core::util::{crc_digest as crc, derive_seed, framed_digest, sample_indices};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// What a successful command produced: standard output text, diagnostics
/// for standard error, and the exit code.
struct Output {
    text: String,
    notes: Vec<String>,
    code: i32,
}

impl From<String> for Output {
    fn from(text: String) -> Self {
        Self {
            text,
            notes: Vec::new(),
            code: 0,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "muse",
    version,
    about = "Loss-trajectory correlation coresets and attribution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled dataset, train the toy model and record loss trajectories.
    TrainToy(TrainToyArgs),
    /// Check an LTRJ trajectory file and report every format violation.
    Validate(ValidateArgs),
    /// Correlate train and query trajectories; write the LTC matrix and per-sample scores.
    Ltc(LtcArgs),
    /// Select a coreset from a scores CSV and print its manifest.
    Select(SelectArgs),
    /// List the training samples with the most extreme LTC for one query.
    Influencers(InfluencersArgs),
    /// Linear datamodeling score of an attribution matrix.
    Lds(LdsArgs),
    /// Prediction flips after removing top-attributed training samples.
    Brittleness(BrittlenessArgs),
    /// Compute and storage overheads of coreset or attribution methods.
    Cost(CostArgs),
    /// Run train-toy, ltc and select from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

/// Toy trainer settings shared by several subcommands.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model family.
    #[arg(long, value_enum, default_value = "softmax")]
    pub model: ModelArg,
    /// Hidden units of the MLP.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Initial weights are uniform in +-scale/sqrt(fan_in); 0 starts from zeros.
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: match self.model {
                ModelArg::Softmax => ModelKind::Softmax,
                ModelArg::Mlp => ModelKind::Mlp { hidden: self.hidden },
            },
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            weight_init_scale: self.init_scale,
            weight_decay: self.weight_decay,
            record_dtype: Dtype::F32,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Output directory for train.ltrj, query.ltrj, train.csv, query.csv and flipped.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: u32,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub dims: usize,
    /// Standard deviation of each class cluster.
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Fraction of training labels replaced by a wrong class.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Clean query samples per class.
    #[arg(long, default_value_t = 20)]
    pub query_per_class: usize,
    /// Precision of the recorded losses.
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// LTRJ file to check.
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct LtcArgs {
    /// Train trajectory file (LTRJ).
    #[arg(long)]
    pub train: PathBuf,
    /// Query trajectory file (LTRJ).
    #[arg(long)]
    pub query: PathBuf,
    /// Where to write the LTC matrix (LTCM).
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write per-sample scores (id,label,score).
    #[arg(long)]
    pub scores: PathBuf,
    /// Also write the matrix as wide CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Use this many uniformly drawn query samples instead of all of them.
    #[arg(long)]
    pub query_sample: Option<usize>,
    /// Seed for --query-sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to MUSE_WORKERS or the number of CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Global,
    ClassBalanced,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Scores CSV written by `ltc`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Coreset size.
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "class-balanced")]
    pub policy: PolicyArg,
    /// Class count; defaults to the train file's, else one more than the largest label.
    #[arg(long)]
    pub classes: Option<u32>,
    /// Train trajectory the scores came from; the manifest records its digest.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Write the manifest here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Positive,
    Negative,
}

#[derive(Debug, Args)]
pub struct InfluencersArgs {
    /// LTC matrix (LTCM).
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub query_id: u64,
    /// Number of influencers to list.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "positive")]
    pub direction: DirectionArg,
    /// Only consider training samples of this class (needs --train).
    #[arg(long)]
    pub class: Option<u32>,
    /// Train trajectory file, for labels.
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeasurableArg {
    Correctness,
    NegativeLoss,
}

#[derive(Debug, Args)]
pub struct LdsArgs {
    /// Training set CSV (id,label,f1..fd).
    #[arg(long)]
    pub train: PathBuf,
    /// Query set CSV.
    #[arg(long)]
    pub query: PathBuf,
    /// Attribution matrix: LTCM file or wide CSV.
    #[arg(long)]
    pub attr: PathBuf,
    /// Number of random subsets.
    #[arg(long, default_value_t = 40)]
    pub subsets: usize,
    /// Subset size as a fraction of the training set.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Models trained per subset.
    #[arg(long, default_value_t = 3)]
    pub retrains: usize,
    #[arg(long, value_enum, default_value = "correctness")]
    pub measurable: MeasurableArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to MUSE_WORKERS or the number of CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BasisArg {
    Reference,
    Labels,
}

#[derive(Debug, Args)]
pub struct BrittlenessArgs {
    /// Training set CSV (id,label,f1..fd).
    #[arg(long)]
    pub train: PathBuf,
    /// Query set CSV.
    #[arg(long)]
    pub query: PathBuf,
    /// Per-sample scores CSV; one removal ranking for all queries.
    #[arg(long, conflicts_with = "attr", required_unless_present = "attr")]
    pub scores: Option<PathBuf>,
    /// Attribution matrix (LTCM or wide CSV); each query uses its own row.
    #[arg(long)]
    pub attr: Option<PathBuf>,
    /// Comma-separated numbers of removed samples.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub retrains: usize,
    /// What a flip is measured against.
    #[arg(long, value_enum, default_value = "reference")]
    pub basis: BasisArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to MUSE_WORKERS or the number of CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodSet {
    Coreset,
    Tda,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UnitsArg {
    Raw,
    Engineering,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    /// ImageNet / ResNet-18 worked example.
    Table4,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, value_enum, default_value = "coreset")]
    pub set: MethodSet,
    /// Start from a built-in workload.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// key = value workload file, applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "engineering")]
    pub units: UnitsArg,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// Training samples N.
    #[arg(long)]
    pub n: Option<f64>,
    /// Query samples Q.
    #[arg(long)]
    pub q: Option<f64>,
    /// Epochs T.
    #[arg(long)]
    pub t: Option<f64>,
    /// FLOPs per forward pass.
    #[arg(long)]
    pub f: Option<f64>,
    /// Parameter count.
    #[arg(long)]
    pub p: Option<f64>,
    /// Input dimensionality.
    #[arg(long)]
    pub d: Option<f64>,
    /// Classes.
    #[arg(long)]
    pub c: Option<f64>,
    /// Coreset size; defaults to ceil(0.1 N).
    #[arg(long)]
    pub k: Option<f64>,
    /// Selection frequency.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Tolerance.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Retrainings or repeats R.
    #[arg(long)]
    pub r: Option<f64>,
    /// Sampling ratio.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Projection dimension.
    #[arg(long)]
    pub p_prime: Option<f64>,
    /// Batch size.
    #[arg(long)]
    pub b: Option<f64>,
    /// Bytes stored per value (default 4).
    #[arg(long)]
    pub bytes_per_param: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// key = value pipeline config.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for every artifact, the manifest and summary.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads; defaults to MUSE_WORKERS or the number of CPUs.
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit code. Machine output goes to `out`, diagnostics to `err`.
pub fn run<O: Write, E: Write>(argv: &[String], out: &mut O, err: &mut E) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(output) => {
            for note in &output.notes {
                let _ = writeln!(err, "{note}");
            }
            match out.write_all(output.text.as_bytes()) {
                Ok(()) => output.code,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    3
                }
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<Output> {
    match command {
        Command::TrainToy(a) => train_toy(a).map(Output::from),
        Command::Validate(a) => validate(a),
        Command::Ltc(a) => ltc_cmd(a).map(Output::from),
        Command::Select(a) => select(a),
        Command::Influencers(a) => influencers(a).map(Output::from),
        Command::Lds(a) => lds(a).map(Output::from),
        Command::Brittleness(a) => brittleness(a).map(Output::from),
        Command::Cost(a) => cost_cmd(a).map(Output::from),
        Command::Pipeline(a) => pipeline_cmd(a).map(Output::from),
    }
}

fn workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("MUSE_WORKERS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| usage(format!("MUSE_WORKERS is not a count: {v:?}")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(usage("worker count must be at least 1"));
    }
    Ok(n)
}

fn json_text(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("json value serializes") + "\n"
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_trajectory(path: &Path) -> Result<trajectory::TrajectoryDataset> {
    trajectory::read_file(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_attr(path: &Path) -> Result<AttributionMatrix> {
    let bytes = fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(b"LTCM") {
        let m = ltcm::read_matrix(&bytes[..]).map_err(|e| data(format!("{}: {e}", path.display())))?;
        Ok(AttributionMatrix::from(&m))
    } else {
        let text = String::from_utf8(bytes).map_err(|e| data(format!("{}: {e}", path.display())))?;
        AttributionMatrix::from_csv(&text).map_err(|e| data(format!("{}: {e}", path.display())))
    }
}

fn read_labeled(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::from_csv(&read_text(path)?, None).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Gives train and query the same class count so the trainer sees both.
fn align_classes(train: LabeledDataset, query: LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
    let c = train.n_classes().max(query.n_classes());
    let rebuild = |d: &LabeledDataset| {
        let features: Vec<f64> = (0..d.len()).flat_map(|m| d.features(m).to_vec()).collect();
        LabeledDataset::new(
            d.sample_ids().to_vec(),
            d.labels().to_vec(),
            features,
            d.dims(),
            c,
        )
        .map_err(data)
    };
    Ok((rebuild(&train)?, rebuild(&query)?))
}

fn train_toy(a: TrainToyArgs) -> Result<String> {
    let mut config = PipelineConfig {
        classes: a.classes,
        per_class: a.per_class,
        dims: a.dims,
        cluster_spread: a.spread,
        label_noise: a.noise,
        query_per_class: a.query_per_class,
        train: a.train.config(a.seed),
        k: 1,
        seed: a.seed,
        ..PipelineConfig::default()
    };
    config.train.record_dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    if a.query_per_class == 0 {
        return Err(usage("query-per-class must be at least 1"));
    }
    config.train.validate().map_err(usage)?;
    let synth = make_synthetic(&config.train_spec()).map_err(usage)?;
    let query = make_synthetic(&config.query_spec()).map_err(usage)?.dataset;
    let out = train_with_logging(&synth.dataset, &query, &config.train).map_err(data)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| data(format!("{}: {e}", a.out_dir.display())))?;
    let train_bytes = out.train_trajectory.to_bytes();
    let query_bytes = out.query_trajectory.to_bytes();
    let train_csv = synth.dataset.to_csv();
    let query_csv = query.to_csv();
    let flipped: String = synth.flipped_ids.iter().map(|id| format!("{id}\n")).collect();
    let files = [
        ("train.ltrj", train_bytes.as_slice(), true),
        ("query.ltrj", query_bytes.as_slice(), true),
        ("train.csv", train_csv.as_bytes(), false),
        ("query.csv", query_csv.as_bytes(), false),
        ("flipped.txt", flipped.as_bytes(), false),
    ];
    let mut digests = serde_json::Map::new();
    for (name, bytes, framed) in files {
        write_bytes(&a.out_dir.join(name), bytes)?;
        let digest = if framed { framed_digest(bytes) } else { crc(bytes) };
        digests.insert(name.to_string(), json!(digest));
    }
    Ok(json_text(&json!({
        "n_train": synth.dataset.len(),
        "n_query": query.len(),
        "n_snapshots": out.train_trajectory.n_snapshots(),
        "n_flipped": synth.flipped_ids.len(),
        "digests": digests,
    })))
}

/// Prints the report either way; an invalid file exits with 2.
fn validate(a: ValidateArgs) -> Result<Output> {
    let file = fs::File::open(&a.path).map_err(|e| data(format!("{}: {e}", a.path.display())))?;
    let report = trajectory::validate(std::io::BufReader::new(file));
    let text = json_text(&serde_json::to_value(&report).map_err(|e| CliError::Internal(e.to_string()))?);
    let notes = report
        .issues
        .iter()
        .map(|i| format!("error: {}: {}", i.code, i.message))
        .collect();
    Ok(Output {
        text,
        notes,
        code: if report.ok { 0 } else { 2 },
    })
}

fn ltc_cmd(a: LtcArgs) -> Result<String> {
    let workers = workers(a.workers)?;
    let train = read_trajectory(&a.train)?;
    let query = read_trajectory(&a.query)?;
    let train_d = compute_deltas(&train);
    let mut query_d = compute_deltas(&query);
    if let Some(m) = a.query_sample {
        if m == 0 || m > query_d.n_samples() {
            return Err(usage(format!(
                "query-sample {m} out of range 1..={}",
                query_d.n_samples()
            )));
        }
        query_d = query_d.select_rows(&sample_indices(query_d.n_samples(), m, derive_seed(a.seed, &[0])));
    }
    let matrix = ltc::ltc_matrix(&train_d, &query_d, workers).map_err(|e| match e {
        LtcError::ZeroWorkers | LtcError::Pool(_) => CliError::Internal(e.to_string()),
        other => data(other),
    })?;
    let scores = ltc::ltc_avg(&matrix).map_err(data)?;
    let matrix_bytes = ltcm::encode(&matrix);
    let scores_csv = coreset::scores_to_csv(&scores, train.labels()).map_err(data)?;
    write_bytes(&a.out, &matrix_bytes)?;
    write_bytes(&a.scores, scores_csv.as_bytes())?;
    let mut digests = serde_json::Map::new();
    digests.insert("matrix".into(), json!(framed_digest(&matrix_bytes)));
    digests.insert("scores".into(), json!(crc(scores_csv.as_bytes())));
    if let Some(path) = &a.csv {
        let csv = matrix.to_csv();
        write_bytes(path, csv.as_bytes())?;
        digests.insert("matrix_csv".into(), json!(crc(csv.as_bytes())));
    }
    let degenerate = matrix.degenerate_mask().iter().filter(|&&d| d).count();
    Ok(json_text(&json!({
        "n_train": matrix.n_train(),
        "n_query": matrix.n_query(),
        "n_degenerate": degenerate,
        "train_digest": train.digest(),
        "query_digest": query.digest(),
        "digests": digests,
    })))
}

fn select(a: SelectArgs) -> Result<Output> {
    let (scores, labels) = coreset::scores_from_csv(&read_text(&a.scores)?).map_err(data)?;
    let train = a.train.as_deref().map(read_trajectory).transpose()?;
    if let Some(t) = &train {
        if t.sample_ids() != scores.train_ids.as_slice() {
            return Err(data("scores do not match the train trajectory ids"));
        }
    }
    let classes = a
        .classes
        .or(train.as_ref().map(|t| t.n_classes()))
        .unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    if a.k == 0 || a.k > scores.len() {
        return Err(usage(format!("k = {} out of range 1..={}", a.k, scores.len())));
    }
    let mut manifest = match a.policy {
        PolicyArg::Global => coreset::select_top_k(&scores, Some(&labels), a.k),
        PolicyArg::ClassBalanced => coreset::select_class_balanced(&scores, &labels, a.k, classes),
    }
    .map_err(data)?;
    if let Some(t) = &train {
        manifest.bind_source(t);
    }
    let notes = manifest
        .warnings
        .iter()
        .map(|w| format!("warning: {w}"))
        .collect();
    let text = manifest.to_json().map_err(data)?;
    let text = match &a.out {
        Some(path) => {
            write_bytes(path, text.as_bytes())?;
            json_text(&json!({
                "manifest": path.display().to_string(),
                "digest": crc(text.as_bytes()),
                "k": manifest.k,
                "per_class_count": manifest.per_class_count,
            }))
        }
        None => text,
    };
    Ok(Output { text, notes, code: 0 })
}

fn influencers(a: InfluencersArgs) -> Result<String> {
    let matrix = ltcm::read_file(&a.matrix).map_err(|e| data(format!("{}: {e}", a.matrix.display())))?;
    let q = matrix
        .query_index(a.query_id)
        .ok_or_else(|| data(format!("query id {} not in matrix", a.query_id)))?;
    let labels = match (&a.train, a.class) {
        (Some(path), _) => {
            let t = read_trajectory(path)?;
            if t.sample_ids() != matrix.train_ids() {
                return Err(data("train trajectory ids do not match the matrix"));
            }
            t.labels().to_vec()
        }
        (None, Some(_)) => return Err(usage("--class needs --train for labels")),
        (None, None) => Vec::new(),
    };
    let direction = match a.direction {
        DirectionArg::Positive => Direction::MostPositive,
        DirectionArg::Negative => Direction::MostNegative,
    };
    let list =
        ltc::top_influencers(&matrix, q, &labels, a.class, a.count, direction).map_err(|e| match e {
            LtcError::ZeroCount => usage(e),
            other => data(other),
        })?;
    let rows: Vec<Value> = list
        .iter()
        .map(|i| {
            let mut row = json!({"train_id": i.train_id, "value": i.value});
            if !labels.is_empty() {
                row["label"] = json!(labels[i.train_index]);
            }
            row
        })
        .collect();
    Ok(json_text(&json!({
        "query_id": a.query_id,
        "direction": match a.direction { DirectionArg::Positive => "positive", DirectionArg::Negative => "negative" },
        "influencers": rows,
    })))
}

fn lds(a: LdsArgs) -> Result<String> {
    let workers = workers(a.workers)?;
    let (train, query) = align_classes(read_labeled(&a.train)?, read_labeled(&a.query)?)?;
    let attr = read_attr(&a.attr)?;
    let tconfig = a.train_args.config(a.seed);
    tconfig.validate().map_err(usage)?;
    let config = LdsConfig {
        n_subsets: a.subsets,
        sampling_ratio: a.alpha,
        retrains_per_subset: a.retrains,
        seed: a.seed,
        measurable: match a.measurable {
            MeasurableArg::Correctness => Measurable::QueryCorrectness,
            MeasurableArg::NegativeLoss => Measurable::NegativeQueryLoss,
        },
        workers,
    };
    let report = eval::run_lds(&train, &query, &attr, &tconfig, &config).map_err(eval_error)?;
    Ok(report.to_json())
}

fn eval_error(e: eval::EvalError) -> CliError {
    match e {
        eval::EvalError::InvalidConfig(_) => usage(e),
        eval::EvalError::Pool(_) => CliError::Internal(e.to_string()),
        eval::EvalError::Train(muse_core::trainer::TrainError::InvalidConfig(_)) => usage(e),
        other => data(other),
    }
}

fn brittleness(a: BrittlenessArgs) -> Result<String> {
    let workers = workers(a.workers)?;
    let (train, query) = align_classes(read_labeled(&a.train)?, read_labeled(&a.query)?)?;
    let tconfig = a.train_args.config(a.seed);
    tconfig.validate().map_err(usage)?;
    let config = BrittlenessConfig {
        k_values: a.k.clone(),
        retrains: a.retrains,
        seed: a.seed,
        basis: match a.basis {
            BasisArg::Reference => FlipBasis::Reference,
            BasisArg::Labels => FlipBasis::Labels,
        },
        workers,
    };
    let report = match (&a.scores, &a.attr) {
        (Some(path), _) => {
            let (scores, _) = coreset::scores_from_csv(&read_text(path)?).map_err(data)?;
            if scores.train_ids != train.sample_ids() {
                return Err(data("scores do not match the training set ids"));
            }
            eval::run_brittleness(&train, &query, &scores.scores, &tconfig, &config)
        }
        (None, Some(path)) => {
            eval::run_brittleness_per_query(&train, &query, &read_attr(path)?, &tconfig, &config)
        }
        (None, None) => return Err(usage("one of --scores or --attr is required")),
    }
    .map_err(eval_error)?;
    Ok(report.to_json())
}

fn cost_cmd(a: CostArgs) -> Result<String> {
    let mut params = match a.preset {
        Some(PresetArg::Table4) => WorkloadParams::imagenet_resnet18(),
        None => WorkloadParams::default(),
    };
    if let Some(path) = &a.config {
        params.apply_config(&read_text(path)?).map_err(usage)?;
    }
    let flags = [
        ("n", a.n),
        ("q", a.q),
        ("t", a.t),
        ("f", a.f),
        ("p", a.p),
        ("d", a.d),
        ("c", a.c),
        ("k", a.k),
        ("gamma", a.gamma),
        ("epsilon", a.epsilon),
        ("r", a.r),
        ("alpha", a.alpha),
        ("p_prime", a.p_prime),
        ("b", a.b),
        ("bytes_per_param", a.bytes_per_param),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            params.set(key, &v.to_string()).map_err(usage)?;
        }
    }
    let table = match a.set {
        MethodSet::Coreset => cost::coreset_overheads(&params),
        MethodSet::Tda => cost::tda_overheads(&params),
    }
    .map_err(usage)?;
    let units = match a.units {
        UnitsArg::Raw => Units::Raw,
        UnitsArg::Engineering => Units::Engineering,
    };
    Ok(match a.format {
        FormatArg::Text => cost::render_report(&table, units),
        FormatArg::Csv => cost::render_csv(&table),
        FormatArg::Json => {
            json_text(&serde_json::to_value(&table).map_err(|e| CliError::Internal(e.to_string()))?)
        }
    })
}

fn pipeline_cmd(a: PipelineArgs) -> Result<String> {
    let mut config = PipelineConfig::from_kv(&read_text(&a.config)?).map_err(usage)?;
    config.workers = workers(a.workers)?;
    let run = pipeline::run_pipeline(&config).map_err(|e| match e {
        PipelineError::Config(_) => usage(e),
        PipelineError::Stage { .. } => data(e),
    })?;
    fs::create_dir_all(&a.out_dir).map_err(|e| data(format!("{}: {e}", a.out_dir.display())))?;
    let manifest = run.manifest.to_json().map_err(data)?;
    let summary = run.summary.to_json();
    let files: [(&str, Vec<u8>); 8] = [
        ("train.ltrj", run.train_trajectory.to_bytes()),
        ("query.ltrj", run.query_trajectory.to_bytes()),
        ("train.csv", run.train.to_csv().into_bytes()),
        ("query.csv", run.query.to_csv().into_bytes()),
        ("ltc.ltcm", ltcm::encode(&run.matrix)),
        (
            "scores.csv",
            coreset::scores_to_csv(&run.scores, run.train.labels())
                .map_err(data)?
                .into_bytes(),
        ),
        ("manifest.json", manifest.into_bytes()),
        ("summary.json", summary.clone().into_bytes()),
    ];
    for (name, bytes) in &files {
        write_bytes(&a.out_dir.join(name), bytes)?;
    }
    Ok(summary)
}
