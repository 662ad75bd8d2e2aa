//! Experiment configuration files.
//!
//! The format is flat `section.key = value` lines, `#` starts a comment.
//! Every key either has a default or is required, and unknown keys are an
//! error. Relative paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::encoder::{Aggregation, EncoderConfig, Similarity};
use crate::loss::{LossConfig, LossKind};
use crate::sampler::SamplerConfig;
use crate::trainer::{AdamConfig, ModelConfig, TrainConfig, TrainMode};

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "SIMPLEX_OUTPUT_DIR";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: expected `section.key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { key: String, line: usize },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("line {line}: invalid value {value:?} for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        line: usize,
        value: String,
        reason: String,
    },
    #[error("`{key}`: file {path} does not exist")]
    MissingPath { key: String, path: PathBuf },
}

/// `(key, default, description)`; `None` marks a required key.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("data.train", None, "training interactions"),
    ("data.test", None, "test interactions"),
    ("data.heldout_history", Some(""), "history of held-out users (strong generalization)"),
    ("data.heldout_test", Some(""), "test items of held-out users"),
    ("model.aggregation", Some("average_pooling"), "average_pooling | self_attention | user_attention"),
    ("model.g", Some("0.5"), "weight of the ID embedding in the fused user vector"),
    ("model.dim", Some("64"), "embedding dimension"),
    ("model.history_len", Some("20"), "history window K"),
    ("model.similarity", Some("auto"), "cosine | dot | auto (per loss kind)"),
    ("model.cosine_eps", Some("1e-12"), "norm clamp for cosine scores"),
    ("model.exclude_target", Some("false"), "drop the target positive from its own history"),
    ("loss.kind", None, "ccl | bpr | bce | sce | phl | mse"),
    ("loss.margin", Some("0.4"), "CCL similarity margin / PHL distance margin"),
    ("loss.negative_weight", Some("150"), "CCL negative weight w"),
    ("sampler.num_negatives", Some("100"), "negatives per positive pair"),
    ("sampler.exclude_train_positives", Some("true"), "reject negatives the user interacted with"),
    ("sampler.max_rejection_retries", Some("64"), "redraw budget per negative"),
    ("sampler.seed", Some("2021"), "seed for initialization, holdout and sampling"),
    ("train.learning_rate", Some("1e-4"), "Adam learning rate"),
    ("train.beta1", Some("0.9"), "Adam beta1"),
    ("train.beta2", Some("0.999"), "Adam beta2"),
    ("train.adam_eps", Some("1e-8"), "Adam epsilon"),
    ("train.l2_reg", Some("0"), "L2 weight on embedding tables"),
    ("train.batch_size", Some("1024"), "positive pairs per step"),
    ("train.max_epochs", Some("100"), "epoch limit"),
    ("train.early_stop_patience", Some("10"), "evaluations without improvement before stopping"),
    ("train.eval_every", Some("1"), "epochs between validation runs"),
    ("train.mode", Some("transductive"), "transductive | strong_generalization"),
    ("train.validation_fraction", Some("0.1"), "per-user holdout share for model selection"),
    ("train.chunk_size", Some("64"), "examples per gradient chunk"),
    ("eval.ks", Some("20,50"), "comma-separated cutoffs"),
    ("output.dir", Some("out"), "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub heldout: Option<(PathBuf, PathBuf)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    pub model: ModelConfig,
    pub history_len: usize,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub eval_ks: Vec<usize>,
    pub output_dir: PathBuf,
}

/// Raw `key -> (line, value)` entries of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                text: line.to_string(),
            })?;
            let key = key.trim();
            if !key.contains('.') || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    text: line.to_string(),
                });
            }
            if !KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: line_no,
                });
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(ConfigError::DuplicateKey {
                    key: key.to_string(),
                    line: line_no,
                });
            }
        }
        Ok(RawConfig { entries })
    }

    /// Replace (or add) a value; used by sweeps. Line 0 marks an override.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(ConfigError::UnknownKey {
                key: key.to_string(),
                line: 0,
            });
        }
        self.entries.insert(key.to_string(), (0, value.into()));
        Ok(())
    }

    fn raw(&self, key: &str) -> Result<(usize, String), ConfigError> {
        if let Some((line, v)) = self.entries.get(key) {
            return Ok((*line, v.clone()));
        }
        let default = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .and_then(|(_, d, _)| *d)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))?;
        Ok((0, default.to_string()))
    }

    fn get<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let (line, value) = self.raw(key)?;
        value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
            key: key.to_string(),
            line,
            value: value.clone(),
            reason: e.to_string(),
        })
    }

    fn check<T>(&self, key: &str, ok: bool, reason: &str, v: T) -> Result<T, ConfigError> {
        if ok {
            return Ok(v);
        }
        let (line, value) = self.raw(key)?;
        Err(ConfigError::InvalidValue {
            key: key.to_string(),
            line,
            value,
            reason: reason.to_string(),
        })
    }

    /// Resolve into a typed config. `base_dir` anchors relative paths.
    pub fn resolve(&self, base_dir: &Path) -> Result<ExperimentConfig, ConfigError> {
        let path = |key: &str| -> Result<Option<PathBuf>, ConfigError> {
            let (_, v) = self.raw(key)?;
            if v.is_empty() {
                return Ok(None);
            }
            let p = base_dir.join(v);
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    key: key.to_string(),
                    path: p,
                });
            }
            Ok(Some(p))
        };
        let train_path = path("data.train")?.ok_or_else(|| ConfigError::MissingKey("data.train".into()))?;
        let test_path = path("data.test")?.ok_or_else(|| ConfigError::MissingKey("data.test".into()))?;
        let heldout = match (path("data.heldout_history")?, path("data.heldout_test")?) {
            (Some(h), Some(t)) => Some((h, t)),
            (None, None) => None,
            (Some(_), None) => return Err(ConfigError::MissingKey("data.heldout_test".into())),
            (None, Some(_)) => return Err(ConfigError::MissingKey("data.heldout_history".into())),
        };

        let kind: LossKind = self.get("loss.kind")?;
        let similarity = match self.raw("model.similarity")?.1.as_str() {
            "auto" => kind.default_similarity(),
            _ => self.get::<Similarity>("model.similarity")?,
        };
        let g: f64 = self.get("model.g")?;
        let g = self.check("model.g", (0.0..=1.0).contains(&g), "must lie in [0, 1]", g)?;
        let eps: f64 = self.get("model.cosine_eps")?;
        let eps = self.check("model.cosine_eps", eps > 0.0, "must be positive", eps)?;
        let dim: usize = self.get("model.dim")?;
        let dim = self.check("model.dim", dim >= 1, "must be at least 1", dim)?;
        let history_len: usize = self.get("model.history_len")?;
        let history_len = self.check("model.history_len", history_len >= 1, "must be at least 1", history_len)?;
        let encoder = EncoderConfig {
            aggregation: self.get::<Aggregation>("model.aggregation")?,
            g,
            similarity,
            cosine_eps: eps,
            exclude_target: self.get("model.exclude_target")?,
        };

        let margin: f64 = self.get("loss.margin")?;
        let margin_ok = match kind {
            LossKind::Ccl => (0.0..=1.0).contains(&margin),
            _ => margin >= 0.0 && margin.is_finite(),
        };
        let margin = self.check("loss.margin", margin_ok, "out of range for this loss", margin)?;
        let w: f64 = self.get("loss.negative_weight")?;
        let w = self.check("loss.negative_weight", w > 0.0, "must be positive", w)?;
        let loss = LossConfig {
            kind,
            margin,
            negative_weight: w,
        };

        let num_negatives: usize = self.get("sampler.num_negatives")?;
        let num_negatives = self.check("sampler.num_negatives", num_negatives >= 1, "must be at least 1", num_negatives)?;
        let retries: usize = self.get("sampler.max_rejection_retries")?;
        let retries = self.check("sampler.max_rejection_retries", retries >= 1, "must be at least 1", retries)?;
        let sampler = SamplerConfig {
            num_negatives,
            exclude_train_positives: self.get("sampler.exclude_train_positives")?,
            max_rejection_retries: retries,
            seed: self.get("sampler.seed")?,
        };

        let lr: f64 = self.get("train.learning_rate")?;
        let lr = self.check("train.learning_rate", lr > 0.0, "must be positive", lr)?;
        let l2: f64 = self.get("train.l2_reg")?;
        let l2 = self.check("train.l2_reg", l2 >= 0.0, "must be non-negative", l2)?;
        let batch_size: usize = self.get("train.batch_size")?;
        let batch_size = self.check("train.batch_size", batch_size >= 1, "must be at least 1", batch_size)?;
        let vf: f64 = self.get("train.validation_fraction")?;
        let vf = self.check("train.validation_fraction", (0.0..1.0).contains(&vf), "must lie in [0, 1)", vf)?;
        let mode: TrainMode = self.get("train.mode")?;
        if mode == TrainMode::StrongGeneralization {
            self.check("model.g", g == 0.0, "strong_generalization requires g = 0", ())?;
            self.check(
                "model.aggregation",
                encoder.aggregation != Aggregation::UserAttention,
                "strong_generalization has no user embedding to attend with",
                (),
            )?;
        }

        let ks_raw = self.raw("eval.ks")?;
        let mut eval_ks = Vec::new();
        for tok in ks_raw.1.split(',') {
            let k: usize = tok.trim().parse().map_err(|_| ConfigError::InvalidValue {
                key: "eval.ks".into(),
                line: ks_raw.0,
                value: ks_raw.1.clone(),
                reason: "expected comma-separated positive integers".into(),
            })?;
            self.check("eval.ks", k >= 1, "cutoffs must be at least 1", ())?;
            eval_ks.push(k);
        }

        let train = TrainConfig {
            adam: AdamConfig {
                learning_rate: lr,
                beta1: self.get("train.beta1")?,
                beta2: self.get("train.beta2")?,
                eps: self.get("train.adam_eps")?,
                l2_reg: l2,
            },
            batch_size,
            max_epochs: self.get("train.max_epochs")?,
            early_stop_patience: self.get("train.early_stop_patience")?,
            eval_every: self.get("train.eval_every")?,
            mode,
            validation_fraction: vf,
            eval_ks: eval_ks.clone(),
            chunk_size: self.get("train.chunk_size")?,
            verbose: false,
        };

        let output_dir = match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => base_dir.join(self.raw("output.dir")?.1),
        };

        Ok(ExperimentConfig {
            data: DataPaths {
                train: train_path,
                test: test_path,
                heldout,
            },
            model: ModelConfig { encoder, dim },
            history_len,
            loss,
            sampler,
            train,
            eval_ks,
            output_dir,
        })
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        RawConfig::parse(text)?.resolve(base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let (raw, base) = load_raw(path)?;
        raw.resolve(&base)
    }
}

/// Read and parse a config file; also returns its directory.
pub fn load_raw(path: impl AsRef<Path>) -> Result<(RawConfig, PathBuf), ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((RawConfig::parse(&text)?, base))
}
