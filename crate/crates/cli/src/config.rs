//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dartsrenet::cells::{CellKind, Genotype, PredecessorTiming, Preset};
use dartsrenet::data::{AugmentConfig, SplitMode};
use dartsrenet::model::NetworkConfig;
use dartsrenet::numerics::{Init, OptimizerKind};
use dartsrenet::renet::Variant;
use dartsrenet::search::{OptimSettings, TrainSettings};

pub const DATA_ENV: &str = "DARTSRENET_DATA";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("`{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Search,
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Drim,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "drim" => Ok(DatasetKind::Drim),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err("expected cifar10, drim or synthetic".into()),
        }
    }
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Drim => "drim",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Where the recurrent cell comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CellSource {
    Preset(Preset),
    File(PathBuf),
    Gru,
    Lstm,
    Mixed,
}

impl CellSource {
    fn parse(s: &str) -> CellSource {
        match s {
            "gru" => CellSource::Gru,
            "lstm" => CellSource::Lstm,
            "mixed" => CellSource::Mixed,
            other => match other.parse::<Preset>() {
                Ok(p) => CellSource::Preset(p),
                Err(_) => CellSource::File(PathBuf::from(other)),
            },
        }
    }

    fn text(&self) -> String {
        match self {
            CellSource::Preset(p) => p.name().to_string(),
            CellSource::File(p) => p.display().to_string(),
            CellSource::Gru => "gru".into(),
            CellSource::Lstm => "lstm".into(),
            CellSource::Mixed => "mixed".into(),
        }
    }
}

/// Every setting of a run. `Display` writes the complete resolved file,
/// which parses back to an equal value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub dataset: DatasetKind,
    pub data_root: PathBuf,
    pub train_file: PathBuf,
    pub test_file: PathBuf,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_size: usize,
    pub train_limit: usize,
    pub test_limit: usize,
    pub cell: CellSource,
    pub vertices: usize,
    /// `None` follows the cell: the DWS preset trains with weight sharing,
    /// the sigmoid-weighting preset with patch weights, anything else
    /// without either.
    pub variant: Option<Variant>,
    pub timing: PredecessorTiming,
    pub stem_channels: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub alpha_init: f64,
    pub init: Init,
    pub precision: Precision,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub max_batches_per_epoch: usize,
    pub optimizer: String,
    pub lr: f64,
    pub clip: Option<f64>,
    pub alpha_lr: f64,
    pub alpha_clip: Option<f64>,
    pub augment: bool,
    pub hflip: f64,
    pub crop_pad: usize,
    pub cutout: usize,
    pub split_fraction: f64,
    pub seed: u64,
    pub search_seeds: Vec<u64>,
}

const KEYS: &[&str] = &[
    "dataset",
    "data_root",
    "train_file",
    "test_file",
    "synthetic_train",
    "synthetic_test",
    "synthetic_size",
    "train_limit",
    "test_limit",
    "cell",
    "vertices",
    "variant",
    "timing",
    "stem_channels",
    "hidden",
    "head_hidden",
    "alpha_init",
    "init",
    "precision",
    "batch_size",
    "eval_batch_size",
    "epochs",
    "patience",
    "max_batches_per_epoch",
    "optimizer",
    "lr",
    "clip",
    "alpha_lr",
    "alpha_clip",
    "augment",
    "hflip",
    "crop_pad",
    "cutout",
    "split_fraction",
    "seed",
    "search_seeds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn optional_text(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        let weights = OptimSettings::weights_default();
        let alpha = OptimSettings::alpha_default();
        let augment = AugmentConfig::default();
        RunConfig {
            command,
            dataset: DatasetKind::Cifar10,
            data_root: std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_default(),
            train_file: PathBuf::new(),
            test_file: PathBuf::new(),
            synthetic_train: 2000,
            synthetic_test: 500,
            synthetic_size: 32,
            train_limit: 0,
            test_limit: 0,
            cell: match command {
                Command::Search => CellSource::Mixed,
                _ => CellSource::Preset(Preset::DirectionalWeightSharing),
            },
            vertices: 8,
            variant: None,
            timing: PredecessorTiming::CurrentStep,
            stem_channels: 64,
            hidden: 256,
            head_hidden: 1024,
            alpha_init: 1e-3,
            init: Init::default(),
            precision: Precision::F32,
            batch_size: 64,
            eval_batch_size: 256,
            epochs: 50,
            patience: 5,
            max_batches_per_epoch: 0,
            optimizer: "adam".into(),
            lr: weights.learning_rate,
            clip: weights.clip_norm,
            alpha_lr: alpha.learning_rate,
            alpha_clip: alpha.clip_norm,
            augment: true,
            hflip: augment.hflip_prob,
            crop_pad: augment.crop_pad,
            cutout: augment.cutout_size,
            split_fraction: match (command, SplitMode::SEARCH_DEFAULT, SplitMode::RETRAIN_DEFAULT) {
                (Command::Search, SplitMode::Search { fraction }, _) => fraction,
                (_, _, SplitMode::Retrain { fraction }) => fraction,
                _ => 0.1,
            },
            seed: 0,
            search_seeds: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (key, v) = (key.trim(), value.trim());
        match key {
            "dataset" => self.dataset = parse(key, v)?,
            "data_root" => self.data_root = PathBuf::from(v),
            "train_file" => self.train_file = PathBuf::from(v),
            "test_file" => self.test_file = PathBuf::from(v),
            "synthetic_train" => self.synthetic_train = parse(key, v)?,
            "synthetic_test" => self.synthetic_test = parse(key, v)?,
            "synthetic_size" => self.synthetic_size = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "cell" => self.cell = CellSource::parse(v),
            "vertices" => self.vertices = parse(key, v)?,
            "variant" => {
                self.variant = match v {
                    "auto" => None,
                    other => Some(parse(key, other)?),
                }
            }
            "timing" => {
                self.timing = match v {
                    "current" => PredecessorTiming::CurrentStep,
                    "previous" => PredecessorTiming::PreviousStep,
                    _ => return Err(value_err(key, v, "expected current or previous")),
                }
            }
            "stem_channels" => self.stem_channels = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "alpha_init" => self.alpha_init = parse(key, v)?,
            "init" => self.init = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(value_err(key, v, "expected f32 or f64")),
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_batches_per_epoch" => self.max_batches_per_epoch = parse(key, v)?,
            "optimizer" => {
                if v != "adam" && v != "sgd" {
                    return Err(value_err(key, v, "expected adam or sgd"));
                }
                self.optimizer = v.into();
            }
            "lr" => self.lr = parse(key, v)?,
            "clip" => self.clip = parse_optional(key, v)?,
            "alpha_lr" => self.alpha_lr = parse(key, v)?,
            "alpha_clip" => self.alpha_clip = parse_optional(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "hflip" => self.hflip = parse(key, v)?,
            "crop_pad" => self.crop_pad = parse(key, v)?,
            "cutout" => self.cutout = parse(key, v)?,
            "split_fraction" => self.split_fraction = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "search_seeds" => {
                self.search_seeds = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Checks every setting without touching any data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &'static str, reason: &str| {
            Err(ConfigError::Invalid {
                key,
                reason: reason.into(),
            })
        };
        match self.dataset {
            DatasetKind::Cifar10 if self.data_root.as_os_str().is_empty() => {
                return bad("data_root", &format!("not set and {DATA_ENV} is empty"))
            }
            DatasetKind::Drim if self.train_file.as_os_str().is_empty() => {
                return bad("train_file", "required for drim")
            }
            DatasetKind::Drim if self.test_file.as_os_str().is_empty() => return bad("test_file", "required for drim"),
            DatasetKind::Synthetic if self.synthetic_train == 0 || self.synthetic_test == 0 => {
                return bad("synthetic_train", "synthetic splits must be non-empty")
            }
            DatasetKind::Synthetic if self.synthetic_size == 0 || !self.synthetic_size.is_multiple_of(8) => {
                return bad("synthetic_size", "must be a positive multiple of 8")
            }
            _ => {}
        }
        if let CellSource::File(p) = &self.cell {
            if !p.is_file() {
                return bad(
                    "cell",
                    &format!("`{}` is not a preset, gru, lstm, mixed or a genotype file", p.display()),
                );
            }
        }
        match (self.command, &self.cell) {
            (Command::Search, CellSource::Mixed) => {}
            (Command::Search, _) => return bad("cell", "search needs cell = mixed"),
            (_, CellSource::Mixed) => return bad("cell", "training needs a discrete cell"),
            _ => {}
        }
        if self.vertices == 0 {
            return bad("vertices", "must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction", "must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.hflip) {
            return bad("hflip", "must be a probability");
        }
        if self.lr < 0.0 || self.alpha_lr < 0.0 {
            return bad("lr", "learning rates must be non-negative");
        }
        for (key, clip) in [("clip", self.clip), ("alpha_clip", self.alpha_clip)] {
            if clip.is_some_and(|c| c <= 0.0) {
                return bad(key, "must be positive or none");
            }
        }
        if !self.search_seeds.is_empty() && self.command != Command::Search {
            return bad("search_seeds", "only used by search");
        }
        self.train_settings().validate().map_err(|e| ConfigError::Invalid {
            key: "batch_size",
            reason: e.to_string(),
        })?;
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant.unwrap_or(match self.cell {
            CellSource::Preset(Preset::DirectionalWeightSharing) => Variant::DirectionalWeightSharing,
            CellSource::Preset(Preset::SigmoidWeighting) => Variant::SigmoidWeighting,
            _ => Variant::Vanilla,
        })
    }

    pub fn cell_kind(&self) -> dartsrenet::Result<CellKind> {
        Ok(match &self.cell {
            CellSource::Preset(p) => CellKind::Genotype(p.genotype()),
            CellSource::File(path) => CellKind::Genotype(Genotype::load(path)?),
            CellSource::Gru => CellKind::Gru,
            CellSource::Lstm => CellKind::Lstm,
            CellSource::Mixed => CellKind::Mixed {
                num_vertices: self.vertices,
            },
        })
    }

    /// Network for images of shape `(c, h, w)`.
    pub fn network(&self, input: (usize, usize, usize)) -> dartsrenet::Result<NetworkConfig> {
        let mut net = NetworkConfig::with_sizes(
            self.cell_kind()?,
            self.variant(),
            self.stem_channels,
            self.hidden,
            self.head_hidden,
        )
        .with_timing(self.timing)
        .with_init(self.init);
        net.input = input;
        net.alpha_init = self.alpha_init;
        net.validate()?;
        Ok(net)
    }

    pub fn train_settings(&self) -> TrainSettings {
        let kind = if self.optimizer == "sgd" {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::adam()
        };
        TrainSettings {
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            max_batches_per_epoch: (self.max_batches_per_epoch > 0).then_some(self.max_batches_per_epoch),
            weights: OptimSettings {
                kind,
                learning_rate: self.lr,
                clip_norm: self.clip,
            },
            alpha: OptimSettings {
                kind,
                learning_rate: self.alpha_lr,
                clip_norm: self.alpha_clip,
            },
            augment: self.augment.then_some(AugmentConfig {
                hflip_prob: self.hflip,
                crop_pad: self.crop_pad,
                cutout_size: self.cutout,
            }),
            seed: self.seed,
        }
    }

    pub fn split(&self) -> SplitMode {
        match self.command {
            Command::Search => SplitMode::Search {
                fraction: self.split_fraction,
            },
            _ => SplitMode::Retrain {
                fraction: self.split_fraction,
            },
        }
    }

    fn value_text(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.name().into(),
            "data_root" => self.data_root.display().to_string(),
            "train_file" => self.train_file.display().to_string(),
            "test_file" => self.test_file.display().to_string(),
            "synthetic_train" => self.synthetic_train.to_string(),
            "synthetic_test" => self.synthetic_test.to_string(),
            "synthetic_size" => self.synthetic_size.to_string(),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "cell" => self.cell.text(),
            "vertices" => self.vertices.to_string(),
            "variant" => self.variant.map_or_else(|| "auto".into(), |v| v.name().into()),
            "timing" => match self.timing {
                PredecessorTiming::CurrentStep => "current".into(),
                PredecessorTiming::PreviousStep => "previous".into(),
            },
            "stem_channels" => self.stem_channels.to_string(),
            "hidden" => self.hidden.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "alpha_init" => self.alpha_init.to_string(),
            "init" => self.init.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "batch_size" => self.batch_size.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "max_batches_per_epoch" => self.max_batches_per_epoch.to_string(),
            "optimizer" => self.optimizer.clone(),
            "lr" => self.lr.to_string(),
            "clip" => optional_text(self.clip),
            "alpha_lr" => self.alpha_lr.to_string(),
            "alpha_clip" => optional_text(self.alpha_clip),
            "augment" => self.augment.to_string(),
            "hflip" => self.hflip.to_string(),
            "crop_pad" => self.crop_pad.to_string(),
            "cutout" => self.cutout.to_string(),
            "split_fraction" => self.split_fraction.to_string(),
            "seed" => self.seed.to_string(),
            "search_seeds" => self
                .search_seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            _ => unreachable!("every key has a text form"),
        }
    }
}

fn value_err(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

impl std::fmt::Display for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_text(key));
        }
        f.write_str(&out)
    }
}
