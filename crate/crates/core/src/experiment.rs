//! Experiment configuration with the single-run driver and sweeps.
//!
//! A config is a TOML document with a handful of sections. Every key can be
//! overridden by a dotted name (`noise.sigma0`, `lot_size`, ...), which is
//! also how sweeps vary one parameter. See [`KNOWN_KEYS`] for the schema.
//!
//! A run directory holds:
//!
//! - `metrics.csv`: one row per uploading client per round, written as the
//!   run goes
//! - `ledger.csv`: the `(q, sigma)` charged to each client each round
//! - `ledger_summary.csv`: the final guarantee per client
//! - `partition.csv`: the client shard assignment
//! - `manifest.json`: the resolved config plus timing and final guarantees

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{RdpOrderGrid, DEFAULT_DELTA};
use crate::datasets::{self, Blobs, Dataset, DatasetError};
use crate::dpcore::{ClipConfig, GaussianSampler, DEFAULT_THRESHOLD_FLOOR};
use crate::federation::{
    Budget, ClientSummary, ClipMode, Federation, FederationConfig, FederationError, NoiseMode,
};
use crate::smallmodel::{Mlp, ModelKind, OptimizerConfig};

/// Environment variable naming the root that relative output directories
/// are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "ADAPFL_OUTPUT_ROOT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const LEDGER_SUMMARY_FILE: &str = "ledger_summary.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

// Streams of the master seed reserved for data preparation. Clients use
// `id + 1` and the server uses 0.
const DATA_STREAM: u64 = u64::MAX;
const SPLIT_STREAM: u64 = u64::MAX - 1;
const PARTITION_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}`: expected {expected}, got {found}")]
    Type {
        key: String,
        expected: String,
        found: String,
    },
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("invalid sweep axis `{axis}`; valid keys: {valid}")]
    InvalidAxis { axis: String, valid: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    UInt,
    Float,
    Str,
    Choice(&'static [&'static str]),
}

impl KeyKind {
    fn describe(self) -> String {
        match self {
            KeyKind::UInt => "a nonnegative integer".into(),
            KeyKind::Float => "a number".into(),
            KeyKind::Str => "a string".into(),
            KeyKind::Choice(opts) => format!("one of {}", opts.join(", ")),
        }
    }
}

/// Every accepted key and its type.
pub const KNOWN_KEYS: &[(&str, KeyKind)] = &[
    ("seed", KeyKind::UInt),
    ("rounds", KeyKind::UInt),
    ("lot_size", KeyKind::UInt),
    ("output_dir", KeyKind::Str),
    ("data.source", KeyKind::Choice(&["synth", "mnist", "fashionmnist"])),
    ("data.dir", KeyKind::Str),
    ("data.validation_fraction", KeyKind::Float),
    ("data.classes", KeyKind::UInt),
    ("data.dim", KeyKind::UInt),
    ("data.per_class", KeyKind::UInt),
    ("data.test_per_class", KeyKind::UInt),
    ("data.separation", KeyKind::Float),
    ("partition.clients", KeyKind::UInt),
    ("partition.shards", KeyKind::UInt),
    ("partition.shards_per_client", KeyKind::UInt),
    ("model.kind", KeyKind::Choice(&["logistic", "mlp"])),
    ("model.hidden", KeyKind::UInt),
    ("optimizer.kind", KeyKind::Choice(&["adam", "sgd"])),
    ("optimizer.learning_rate", KeyKind::Float),
    ("optimizer.beta1", KeyKind::Float),
    ("optimizer.beta2", KeyKind::Float),
    ("optimizer.eps", KeyKind::Float),
    ("clip.mode", KeyKind::Choice(&["adaptive", "constant"])),
    ("clip.factor", KeyKind::Float),
    ("clip.floor", KeyKind::Float),
    ("clip.threshold", KeyKind::Float),
    ("noise.mode", KeyKind::Choice(&["adaptive", "constant"])),
    ("noise.sigma0", KeyKind::Float),
    ("noise.beta", KeyKind::Float),
    ("noise.sigma", KeyKind::Float),
    ("privacy.epsilon", KeyKind::Float),
    ("privacy.delta", KeyKind::Float),
    ("privacy.min_order", KeyKind::UInt),
    ("privacy.max_order", KeyKind::UInt),
];

fn key_kind(key: &str) -> Option<KeyKind> {
    KNOWN_KEYS.iter().find(|(k, _)| *k == key).map(|&(_, kind)| kind)
}

fn valid_keys() -> String {
    KNOWN_KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

/// Resolves a full dotted key, or a leaf name that matches exactly one key.
pub fn resolve_key(name: &str) -> Option<&'static str> {
    if let Some(&(k, _)) = KNOWN_KEYS.iter().find(|(k, _)| *k == name) {
        return Some(k);
    }
    let mut matches = KNOWN_KEYS
        .iter()
        .filter(|(k, _)| k.rsplit('.').next() == Some(name));
    match (matches.next(), matches.next()) {
        (Some(&(k, _)), None) => Some(k),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Mnist,
    Fashionmnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Adaptive,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding the four standard IDX files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Share of the test split held out for validation.
    pub validation_fraction: f64,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            dir: None,
            validation_fraction: 0.5,
            classes: 2,
            dim: 20,
            per_class: 1000,
            test_per_class: 500,
            separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSection {
    pub clients: usize,
    pub shards: usize,
    pub shards_per_client: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            clients: 10,
            shards: 400,
            shards_per_client: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelChoice,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelChoice::Mlp,
            hidden: Mlp::DEFAULT_HIDDEN,
        }
    }
}

impl ModelSection {
    pub fn model_kind(&self) -> ModelKind {
        match self.kind {
            ModelChoice::Logistic => ModelKind::Logistic,
            ModelChoice::Mlp => ModelKind::Mlp {
                hidden: self.hidden,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipSection {
    pub mode: Mode,
    pub factor: f64,
    pub floor: f64,
    pub threshold: f64,
}

impl Default for ClipSection {
    fn default() -> Self {
        Self {
            mode: Mode::Adaptive,
            factor: 1.0,
            floor: DEFAULT_THRESHOLD_FLOOR,
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSection {
    pub mode: Mode,
    pub sigma0: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            mode: Mode::Adaptive,
            sigma0: 6.0,
            beta: 0.9999,
            sigma: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    pub min_order: u32,
    pub max_order: u32,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            delta: DEFAULT_DELTA,
            min_order: 2,
            max_order: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub lot_size: usize,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub clip: ClipSection,
    pub noise: NoiseSection,
    pub privacy: PrivacySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 10_000,
            lot_size: 78,
            output_dir: PathBuf::from("adapfl-run"),
            data: DataSection::default(),
            partition: PartitionSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            clip: ClipSection::default(),
            noise: NoiseSection::default(),
            privacy: PrivacySection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks every field, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        if self.lot_size == 0 {
            return Err(invalid("lot_size", "lot size must be at least 1"));
        }
        let d = &self.data;
        if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
            return Err(invalid("data.validation_fraction", "must lie in (0, 1)"));
        }
        match d.source {
            DataSource::Synth => {
                if d.classes < 2 {
                    return Err(invalid("data.classes", "need at least 2 classes"));
                }
                if d.dim == 0 {
                    return Err(invalid("data.dim", "must be positive"));
                }
                if d.per_class == 0 {
                    return Err(invalid("data.per_class", "must be positive"));
                }
                if d.test_per_class == 0 {
                    return Err(invalid("data.test_per_class", "must be positive"));
                }
                if !(d.separation >= 0.0 && d.separation.is_finite()) {
                    return Err(invalid("data.separation", "must be nonnegative"));
                }
            }
            DataSource::Mnist | DataSource::Fashionmnist => {
                if d.dir.is_none() {
                    return Err(invalid("data.dir", "required for IDX datasets"));
                }
            }
        }
        let p = &self.partition;
        if p.clients == 0 {
            return Err(invalid("partition.clients", "must be positive"));
        }
        if p.shards_per_client == 0 {
            return Err(invalid("partition.shards_per_client", "must be positive"));
        }
        if p.clients * p.shards_per_client != p.shards {
            return Err(invalid(
                "partition.shards",
                format!(
                    "must equal clients * shards_per_client = {}",
                    p.clients * p.shards_per_client
                ),
            ));
        }
        if d.source == DataSource::Synth && !(d.classes * d.per_class).is_multiple_of(p.shards) {
            return Err(invalid(
                "partition.shards",
                format!("must divide the {} training examples", d.classes * d.per_class),
            ));
        }
        if self.model.kind == ModelChoice::Mlp && self.model.hidden == 0 {
            return Err(invalid("model.hidden", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(invalid("optimizer.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(invalid("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(invalid("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(invalid("optimizer.eps", "must be positive"));
        }
        let c = &self.clip;
        match c.mode {
            Mode::Adaptive => {
                if !(c.factor > 0.0 && c.factor.is_finite()) {
                    return Err(invalid("clip.factor", "must be positive"));
                }
                if !(c.floor > 0.0 && c.floor.is_finite()) {
                    return Err(invalid("clip.floor", "must be positive"));
                }
            }
            Mode::Constant => {
                if !(c.threshold > 0.0 && c.threshold.is_finite()) {
                    return Err(invalid("clip.threshold", "must be positive"));
                }
            }
        }
        let pr = &self.privacy;
        if !(pr.epsilon > 0.0) {
            return Err(invalid("privacy.epsilon", "must be positive"));
        }
        if !(pr.delta > 0.0 && pr.delta < 1.0) {
            return Err(invalid("privacy.delta", "must lie in (0, 1)"));
        }
        if pr.min_order < 2 {
            return Err(invalid("privacy.min_order", "must be at least 2"));
        }
        if pr.max_order < pr.min_order {
            return Err(invalid("privacy.max_order", "must be at least min_order"));
        }
        let n = &self.noise;
        match n.mode {
            Mode::Adaptive => {
                if !(n.sigma0 > 0.0 && n.sigma0.is_finite()) {
                    return Err(invalid("noise.sigma0", "must be positive"));
                }
                if !(n.beta > 0.0 && n.beta < 1.0) {
                    return Err(invalid("noise.beta", "must lie in (0, 1)"));
                }
            }
            Mode::Constant => {
                if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                    return Err(invalid("noise.sigma", "must be nonnegative"));
                }
                if n.sigma == 0.0 && pr.epsilon != f64::INFINITY {
                    return Err(invalid(
                        "noise.sigma",
                        "sigma = 0 is non-private and needs privacy.epsilon = inf",
                    ));
                }
            }
        }
        self.federation_config()?.validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<RdpOrderGrid> {
        RdpOrderGrid::range(self.privacy.min_order, self.privacy.max_order)
            .map_err(|e| invalid("privacy.min_order", e.to_string()))
    }

    pub fn federation_config(&self) -> Result<FederationConfig> {
        let clip = match self.clip.mode {
            Mode::Adaptive => ClipMode::Adaptive(ClipConfig {
                clip_factor: self.clip.factor,
                floor: self.clip.floor,
            }),
            Mode::Constant => ClipMode::Constant {
                threshold: self.clip.threshold,
            },
        };
        let noise = match self.noise.mode {
            Mode::Adaptive => NoiseMode::Adaptive {
                sigma0: self.noise.sigma0,
                beta: self.noise.beta,
            },
            Mode::Constant => NoiseMode::Constant {
                sigma: self.noise.sigma,
            },
        };
        Ok(FederationConfig {
            lot_size: self.lot_size,
            clip,
            noise,
            budget: Budget {
                epsilon: self.privacy.epsilon,
                delta: self.privacy.delta,
            },
            rounds: self.rounds,
            seed: self.seed,
            optimizer: self.optimizer,
            grid: self.grid()?,
        })
    }

    /// Joins a relative output directory onto `root`.
    pub fn resolve_output(&mut self, root: Option<&Path>) {
        if let Some(root) = root {
            if self.output_dir.is_relative() {
                self.output_dir = root.join(&self.output_dir);
            }
        }
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| ExperimentError::Syntax(e.to_string()))
    }
}

/// Root for relative output directories taken from [`OUTPUT_ROOT_ENV`].
pub fn output_root_from_env() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn value_kind_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

fn check_value(key: &str, kind: KeyKind, v: &toml::Value) -> Result<()> {
    let ok = match (kind, v) {
        (KeyKind::UInt, toml::Value::Integer(i)) => *i >= 0,
        (KeyKind::Float, toml::Value::Integer(_) | toml::Value::Float(_)) => true,
        (KeyKind::Str, toml::Value::String(_)) => true,
        (KeyKind::Choice(opts), toml::Value::String(s)) => opts.contains(&s.as_str()),
        _ => false,
    };
    if ok {
        return Ok(());
    }
    let found = match v {
        toml::Value::String(s) => format!("\"{s}\""),
        toml::Value::Integer(i) => i.to_string(),
        other => value_kind_name(other).to_string(),
    };
    Err(ExperimentError::Type {
        key: key.to_string(),
        expected: kind.describe(),
        found,
    })
}

fn check_table(table: &toml::Table, prefix: &str) -> Result<()> {
    for (name, v) in table {
        let key = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        match (key_kind(&key), v) {
            (Some(kind), v) => check_value(&key, kind, v)?,
            (None, toml::Value::Table(inner))
                if prefix.is_empty() && KNOWN_KEYS.iter().any(|(k, _)| k.starts_with(&format!("{key}."))) =>
            {
                check_table(inner, &key)?
            }
            (None, _) => return Err(ExperimentError::UnknownKey { key }),
        }
    }
    Ok(())
}

fn parse_override(key: &str, raw: &str) -> Result<toml::Value> {
    let kind = key_kind(key).ok_or_else(|| ExperimentError::UnknownKey {
        key: key.to_string(),
    })?;
    let type_err = || ExperimentError::Type {
        key: key.to_string(),
        expected: kind.describe(),
        found: format!("\"{raw}\""),
    };
    let value = match kind {
        KeyKind::UInt => {
            let n: u64 = raw.trim().parse().map_err(|_| type_err())?;
            toml::Value::Integer(i64::try_from(n).map_err(|_| type_err())?)
        }
        KeyKind::Float => toml::Value::Float(raw.trim().parse().map_err(|_| type_err())?),
        KeyKind::Str | KeyKind::Choice(_) => toml::Value::String(raw.to_string()),
    };
    check_value(key, kind, &value)?;
    Ok(value)
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
        }
        Some((section, leaf)) => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(leaf.to_string(), value);
                }
                other => {
                    return Err(ExperimentError::Type {
                        key: section.to_string(),
                        expected: "a table".into(),
                        found: value_kind_name(other).into(),
                    })
                }
            }
        }
    }
    Ok(())
}

fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    check_table(&table, "")?;
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ExperimentError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses TOML text and applies `(dotted key, raw value)` overrides on top.
pub fn parse_config_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| ExperimentError::Syntax(e.to_string()))?;
    // Catch unknown or mistyped file keys before any override can mask them.
    check_table(&table, "")?;
    for (key, raw) in overrides {
        let value = parse_override(key, raw)?;
        set_dotted(&mut table, key, value)?;
    }
    from_table(table)
}

/// Reads the config file (if any) and applies the overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

/// The splits a config trains and evaluates on.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let (images, labels) = (dir.join(images), dir.join(labels));
    for p in [&images, &labels] {
        fs::metadata(p).map_err(io_err(p))?;
    }
    Ok(datasets::load_idx(&images, &labels)?)
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Synth => {
            let mut rng = GaussianSampler::with_stream(cfg.seed, DATA_STREAM);
            let blobs = Blobs::new(d.classes, d.dim, d.separation, &mut rng);
            let train = blobs.sample(d.per_class, &mut rng, "synth-train");
            let test = blobs.sample(d.test_per_class, &mut rng, "synth-test");
            (train, test)
        }
        DataSource::Mnist | DataSource::Fashionmnist => {
            let dir = d.dir.as_deref().ok_or_else(|| invalid("data.dir", "missing"))?;
            let train = load_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
            let test = load_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
            (train, test)
        }
    };
    let val_len = (test.len() as f64 * d.validation_fraction).round() as usize;
    let (validation, test) = test.split(val_len, &mut GaussianSampler::with_stream(cfg.seed, SPLIT_STREAM));
    Ok(PreparedData {
        train,
        validation,
        test,
    })
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    round: u64,
    client_id: usize,
    eps_dp: f64,
    best_order: u32,
    sigma: f64,
    clip_threshold: f64,
    realized_lot: usize,
    train_loss: f64,
    val_loss: f64,
    test_acc: f64,
}

#[derive(Debug, Serialize)]
struct LedgerRow {
    round: u64,
    client_id: usize,
    q: f64,
    sigma: f64,
    eps_dp: f64,
    best_order: u32,
    delta: f64,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    client_id: usize,
    rounds: u64,
    status: String,
    epsilon: f64,
    delta: f64,
    best_order: u32,
}

/// Header + field order of `metrics.csv`.
pub const METRICS_COLUMNS: &[&str] = &[
    "round",
    "client_id",
    "eps_dp",
    "best_order",
    "sigma",
    "clip_threshold",
    "realized_lot",
    "train_loss",
    "val_loss",
    "test_acc",
];

pub const LEDGER_COLUMNS: &[&str] = &["round", "client_id", "q", "sigma", "eps_dp", "best_order", "delta"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub versions: BTreeMap<String, String>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    pub rounds_completed: u64,
    pub final_test_acc: Option<f64>,
    pub clients: Vec<ClientSummary>,
}

fn module_versions() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    ["accountant", "smallmodel", "dpcore", "scheduler", "federation", "datasets", "cli"]
        .into_iter()
        .map(|m| (m.to_string(), v.clone()))
        .collect()
}

fn csv_writer(path: &Path, columns: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(columns)?;
    Ok(w)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Runs one experiment end to end and writes its artifacts to
/// `cfg.output_dir`. Budget exhaustion of every client is a normal stop.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let data = prepare_data(cfg)?;
    let p = &cfg.partition;
    let partition = datasets::noniid_partition(
        &data.train,
        p.clients,
        p.shards,
        p.shards_per_client,
        &mut GaussianSampler::with_stream(cfg.seed, PARTITION_STREAM),
    )?;
    let part_path = out.join(PARTITION_FILE);
    partition.write_csv(BufWriter::new(File::create(&part_path).map_err(io_err(&part_path))?))?;

    let model = cfg
        .model
        .model_kind()
        .build(data.train.feature_dim(), data.train.classes);
    let fcfg = cfg.federation_config()?;
    let delta = fcfg.budget.delta;
    let mut fed = Federation::new(
        fcfg,
        model,
        Arc::new(data.train),
        &partition,
        data.validation,
        data.test,
    )?;

    let mut metrics = csv_writer(&out.join(METRICS_FILE), METRICS_COLUMNS)?;
    let mut ledger = csv_writer(&out.join(LEDGER_FILE), LEDGER_COLUMNS)?;
    metrics.flush().map_err(io_err(&out))?;
    let mut rounds_completed = 0;
    let mut final_test_acc = None;
    while let Some(rec) = fed.step()? {
        for c in &rec.clients {
            metrics.serialize(MetricsRow {
                round: rec.round,
                client_id: c.client_id,
                eps_dp: c.eps_dp,
                best_order: c.best_order,
                sigma: c.sigma,
                clip_threshold: c.clip_threshold,
                realized_lot: c.realized_lot,
                train_loss: c.train_loss,
                val_loss: rec.val_loss,
                test_acc: rec.test_acc,
            })?;
            ledger.serialize(LedgerRow {
                round: rec.round,
                client_id: c.client_id,
                q: c.q,
                sigma: c.sigma,
                eps_dp: c.eps_dp,
                best_order: c.best_order,
                delta,
            })?;
        }
        metrics.flush().map_err(io_err(&out))?;
        if rec.round % 100 == 0 {
            log::info!(
                "round {} uploads {} val_loss {:.4} test_acc {:.4}",
                rec.round,
                rec.clients.len(),
                rec.val_loss,
                rec.test_acc
            );
        }
        rounds_completed = rec.round + 1;
        final_test_acc = Some(rec.test_acc);
    }
    ledger.flush().map_err(io_err(&out))?;

    let clients = fed.summaries()?;
    let mut summary = csv_writer(
        &out.join(LEDGER_SUMMARY_FILE),
        &["client_id", "rounds", "status", "epsilon", "delta", "best_order"],
    )?;
    for c in &clients {
        summary.serialize(SummaryRow {
            client_id: c.client_id,
            rounds: c.rounds,
            status: format!("{:?}", c.status).to_lowercase(),
            epsilon: c.guarantee.epsilon,
            delta: c.guarantee.delta,
            best_order: c.guarantee.best_order,
        })?;
    }
    summary.flush().map_err(io_err(&out))?;

    let manifest = RunManifest {
        config: cfg.clone(),
        versions: module_versions(),
        started_unix_secs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        rounds_completed,
        final_test_acc,
        clients,
    };
    write_atomic(&out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    log::info!("finished {} rounds in {}", rounds_completed, out.display());
    Ok(RunSummary {
        output_dir: out,
        manifest,
    })
}

/// Runs `template` once per value of `axis`, each in
/// `template.output_dir/<axis>=<value>`.
pub fn sweep(template: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<RunSummary>> {
    let key = resolve_key(axis).ok_or_else(|| ExperimentError::InvalidAxis {
        axis: axis.to_string(),
        valid: valid_keys(),
    })?;
    if key == "output_dir" {
        return Err(ExperimentError::InvalidAxis {
            axis: axis.to_string(),
            valid: valid_keys(),
        });
    }
    let base = template.to_table()?;
    values
        .iter()
        .map(|raw| {
            let mut table = base.clone();
            set_dotted(&mut table, key, parse_override(key, raw)?)?;
            let mut cfg = from_table(table)?;
            cfg.output_dir = template.output_dir.join(format!("{axis}={raw}"));
            run_experiment(&cfg)
        })
        .collect()
}
