//! Experiment configuration.
//!
//! A [`TrainConfig`] holds every hyperparameter of a run. It is read from and
//! written to a flat `key = value` text file (one key per line, `#` starts a
//! comment). Unset keys keep their defaults, which are the full-scale values
//! used for CIFAR-10 with 4,000 labels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse value `{value}` for key `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

/// Which feature-similarity loss is used for the self-supervised term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SslLossKind {
    Cosine,
    Mse,
    SoftmaxCe,
}

impl fmt::Display for SslLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SslLossKind::Cosine => "cosine",
            SslLossKind::Mse => "mse",
            SslLossKind::SoftmaxCe => "softmax_ce",
        })
    }
}

impl FromStr for SslLossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(SslLossKind::Cosine),
            "mse" => Ok(SslLossKind::Mse),
            "softmax_ce" | "softmax" => Ok(SslLossKind::SoftmaxCe),
            other => Err(format!("unknown ssl loss kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Labeled images per step (B).
    pub batch_size_labeled: usize,
    /// Unlabeled-to-labeled batch ratio (μ).
    pub mu: usize,
    /// Pseudo-label confidence threshold (τ).
    pub tau: f64,
    /// Weight of the self-supervised loss.
    pub w_s: f64,
    /// Weight-decay coefficient.
    pub w_d: f64,
    /// Initial learning rate (η₀).
    pub eta0: f64,
    /// Cosine decay rate (γ).
    pub gamma: f64,
    /// Number of gradient updates (K).
    pub total_steps: usize,
    pub sgd_momentum: f64,
    pub ema_momentum: f64,
    pub num_classes: usize,
    /// Penultimate-layer width (d).
    pub feature_dim: usize,
    pub ssl_loss_kind: SslLossKind,
    /// Teacher temperature (λ) of the softmax feature loss.
    pub softmax_temperature: f64,
    pub enable_pseudo_label_loss: bool,
    pub seed: u64,

    pub dataset: String,
    pub arch: String,
    pub num_labels: usize,
    pub fold: u64,
    pub projection_bias: bool,
    pub ops_per_image: usize,
    pub cutout_fraction: f64,
    /// Steps between evaluations; 0 selects `total_steps / 64`.
    pub eval_interval: usize,
    /// Steps between loss rows in the metric log; 0 selects `total_steps / 256`.
    pub log_interval: usize,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    pub eval_batch_size: usize,
    pub record_wall_time: bool,
    pub synthetic_train_size: usize,
    pub synthetic_test_size: usize,
    pub synthetic_distractor: bool,
    /// Whether the labeled examples are also part of the unlabeled pool.
    pub labeled_in_unlabeled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size_labeled: 64,
            mu: 7,
            tau: 0.95,
            w_s: 5.0,
            w_d: 0.0005,
            eta0: 0.3,
            gamma: 7.0 / 8.0,
            total_steps: 352_000,
            sgd_momentum: 0.9,
            ema_momentum: 0.999,
            num_classes: 10,
            feature_dim: 128,
            ssl_loss_kind: SslLossKind::Cosine,
            softmax_temperature: 1.0,
            enable_pseudo_label_loss: true,
            seed: 0,
            dataset: "cifar10".into(),
            arch: "wrn-28-2".into(),
            num_labels: 4000,
            fold: 0,
            projection_bias: true,
            ops_per_image: 2,
            cutout_fraction: 0.5,
            eval_interval: 0,
            log_interval: 0,
            checkpoint_interval: 0,
            eval_batch_size: 256,
            record_wall_time: true,
            synthetic_train_size: 6000,
            synthetic_test_size: 600,
            synthetic_distractor: false,
            labeled_in_unlabeled: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_real(key: &str, value: &str) -> Result<f64, ConfigError> {
    // Allow simple fractions such as `7/8`.
    if let Some((num, den)) = value.split_once('/') {
        let num: f64 = parse(key, num.trim())?;
        let den: f64 = parse(key, den.trim())?;
        return Ok(num / den);
    }
    parse(key, value)
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "dataset",
        "num_labels",
        "fold",
        "arch",
        "num_classes",
        "feature_dim",
        "projection_bias",
        "batch_size_labeled",
        "mu",
        "tau",
        "w_s",
        "w_d",
        "eta0",
        "gamma",
        "total_steps",
        "sgd_momentum",
        "ema_momentum",
        "ssl_loss_kind",
        "softmax_temperature",
        "enable_pseudo_label_loss",
        "ops_per_image",
        "cutout_fraction",
        "eval_interval",
        "log_interval",
        "checkpoint_interval",
        "eval_batch_size",
        "record_wall_time",
        "synthetic_train_size",
        "synthetic_test_size",
        "synthetic_distractor",
        "labeled_in_unlabeled",
    ];

    /// Assign one key from its textual value. Does not validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "batch_size_labeled" => self.batch_size_labeled = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "tau" => self.tau = parse_real(key, value)?,
            "w_s" => self.w_s = parse_real(key, value)?,
            "w_d" => self.w_d = parse_real(key, value)?,
            "eta0" => self.eta0 = parse_real(key, value)?,
            "gamma" => self.gamma = parse_real(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "sgd_momentum" => self.sgd_momentum = parse_real(key, value)?,
            "ema_momentum" => self.ema_momentum = parse_real(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "ssl_loss_kind" => {
                self.ssl_loss_kind = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                })?
            }
            "softmax_temperature" => self.softmax_temperature = parse_real(key, value)?,
            "enable_pseudo_label_loss" => self.enable_pseudo_label_loss = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "arch" => self.arch = value.to_string(),
            "num_labels" => self.num_labels = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "projection_bias" => self.projection_bias = parse(key, value)?,
            "ops_per_image" => self.ops_per_image = parse(key, value)?,
            "cutout_fraction" => self.cutout_fraction = parse_real(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "record_wall_time" => self.record_wall_time = parse(key, value)?,
            "synthetic_train_size" => self.synthetic_train_size = parse(key, value)?,
            "synthetic_test_size" => self.synthetic_test_size = parse(key, value)?,
            "synthetic_distractor" => self.synthetic_distractor = parse(key, value)?,
            "labeled_in_unlabeled" => self.labeled_in_unlabeled = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Textual value of every key, in [`TrainConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|&key| {
                let value = match key {
                    "batch_size_labeled" => self.batch_size_labeled.to_string(),
                    "mu" => self.mu.to_string(),
                    "tau" => self.tau.to_string(),
                    "w_s" => self.w_s.to_string(),
                    "w_d" => self.w_d.to_string(),
                    "eta0" => self.eta0.to_string(),
                    "gamma" => self.gamma.to_string(),
                    "total_steps" => self.total_steps.to_string(),
                    "sgd_momentum" => self.sgd_momentum.to_string(),
                    "ema_momentum" => self.ema_momentum.to_string(),
                    "num_classes" => self.num_classes.to_string(),
                    "feature_dim" => self.feature_dim.to_string(),
                    "ssl_loss_kind" => self.ssl_loss_kind.to_string(),
                    "softmax_temperature" => self.softmax_temperature.to_string(),
                    "enable_pseudo_label_loss" => self.enable_pseudo_label_loss.to_string(),
                    "seed" => self.seed.to_string(),
                    "dataset" => self.dataset.clone(),
                    "arch" => self.arch.clone(),
                    "num_labels" => self.num_labels.to_string(),
                    "fold" => self.fold.to_string(),
                    "projection_bias" => self.projection_bias.to_string(),
                    "ops_per_image" => self.ops_per_image.to_string(),
                    "cutout_fraction" => self.cutout_fraction.to_string(),
                    "eval_interval" => self.eval_interval.to_string(),
                    "log_interval" => self.log_interval.to_string(),
                    "checkpoint_interval" => self.checkpoint_interval.to_string(),
                    "eval_batch_size" => self.eval_batch_size.to_string(),
                    "record_wall_time" => self.record_wall_time.to_string(),
                    "synthetic_train_size" => self.synthetic_train_size.to_string(),
                    "synthetic_test_size" => self.synthetic_test_size.to_string(),
                    "synthetic_distractor" => self.synthetic_distractor.to_string(),
                    "labeled_in_unlabeled" => self.labeled_in_unlabeled.to_string(),
                    _ => unreachable!("key list out of sync"),
                };
                (key, value)
            })
            .collect()
    }

    /// Apply the `key = value` lines of a config document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply `key=value` overrides as given to `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: item.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Stable hash of the serialized config, stored in checkpoints.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_text().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, key: &'static str, message: &str) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    message: message.to_string(),
                })
            }
        }
        // tau above 1 is accepted: it masks every pseudo-label (supervised baseline)
        check(self.tau >= 0.0 && self.tau.is_finite(), "tau", "tau must be a finite value ≥ 0")?;
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            "gamma",
            "gamma must lie in (0,1)",
        )?;
        check(self.w_s >= 0.0, "w_s", "w_s must be >= 0")?;
        check(self.w_d >= 0.0, "w_d", "w_d must be >= 0")?;
        check(self.eta0 > 0.0, "eta0", "eta0 must be > 0")?;
        check(
            (0.0..1.0).contains(&self.sgd_momentum),
            "sgd_momentum",
            "sgd_momentum must lie in [0,1)",
        )?;
        check(
            (0.0..1.0).contains(&self.ema_momentum),
            "ema_momentum",
            "ema_momentum must lie in [0,1)",
        )?;
        check(
            self.softmax_temperature > 0.0,
            "softmax_temperature",
            "softmax_temperature must be > 0",
        )?;
        check(
            self.cutout_fraction > 0.0 && self.cutout_fraction < 1.0,
            "cutout_fraction",
            "cutout_fraction must lie in (0,1)",
        )?;
        for (key, value) in [
            ("batch_size_labeled", self.batch_size_labeled),
            ("mu", self.mu),
            ("total_steps", self.total_steps),
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
            ("num_labels", self.num_labels),
            ("eval_batch_size", self.eval_batch_size),
        ] {
            check(value >= 1, key, &format!("{key} must be >= 1"))?;
        }
        Ok(())
    }

    /// Effective evaluation interval (never zero).
    pub fn eval_every(&self) -> usize {
        if self.eval_interval > 0 {
            self.eval_interval
        } else {
            (self.total_steps / 64).max(1)
        }
    }

    pub fn log_every(&self) -> usize {
        if self.log_interval > 0 {
            self.log_interval
        } else {
            (self.total_steps / 256).max(1)
        }
    }

    /// Unlabeled images per step (μB).
    pub fn unlabeled_batch(&self) -> usize {
        self.mu * self.batch_size_labeled
    }
}

/// Read a config file on top of the defaults and validate it.
pub fn load_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TrainConfig::parse_str(&text)
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "cifar10-40",
    "cifar10-250",
    "cifar10-4000",
    "cifar100-400",
    "cifar100-1000",
    "cifar100-2500",
    "cifar100-10000",
    "svhn-40",
    "svhn-250",
    "svhn-1000",
    "stl10-1000",
    "desk-synthetic",
];

/// `w_s` for CIFAR-100 with 1,000 labels, which has no published value:
/// linear interpolation between the 400-label (2.0) and 2,500-label (5.0) settings.
pub const CIFAR100_1000_W_S: f64 = 2.0 + (1000.0 - 400.0) / (2500.0 - 400.0) * (5.0 - 2.0);

/// Per-dataset, per-split configuration.
pub fn preset(name: &str) -> Result<TrainConfig, ConfigError> {
    let base = TrainConfig::default();
    let (dataset, labels) = name
        .rsplit_once('-')
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    let unknown = || ConfigError::UnknownPreset(name.to_string());

    let cfg = match dataset {
        "cifar10" | "svhn" => {
            let w_s = match (dataset, labels) {
                ("cifar10", "40") => 0.5,
                ("cifar10", "250") => 1.0,
                ("cifar10", "4000") => 5.0,
                ("svhn", "40") => 0.001,
                ("svhn", "250") => 0.05,
                ("svhn", "1000") => 0.05,
                _ => return Err(unknown()),
            };
            TrainConfig {
                dataset: dataset.to_string(),
                num_labels: labels.parse().map_err(|_| unknown())?,
                w_s,
                gamma: 7.0 / 8.0,
                w_d: 0.0005,
                num_classes: 10,
                arch: "wrn-28-2".into(),
                feature_dim: 128,
                ..base
            }
        }
        "cifar100" => {
            let w_s = match labels {
                "400" => 2.0,
                "1000" => CIFAR100_1000_W_S,
                "2500" => 5.0,
                "10000" => 10.0,
                _ => return Err(unknown()),
            };
            TrainConfig {
                dataset: dataset.to_string(),
                num_labels: labels.parse().map_err(|_| unknown())?,
                w_s,
                gamma: 5.0 / 8.0,
                w_d: 0.001,
                num_classes: 100,
                arch: "wrn-28-8".into(),
                feature_dim: 512,
                ..base
            }
        }
        "stl10" if labels == "1000" => TrainConfig {
            dataset: "stl10".into(),
            num_labels: 1000,
            w_s: 1.0,
            gamma: 7.0 / 8.0,
            w_d: 0.0005,
            num_classes: 10,
            arch: "wrn-37-2".into(),
            feature_dim: 256,
            ..base
        },
        "desk" if labels == "synthetic" => desk_synthetic(),
        _ => return Err(unknown()),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Scaled-down run on the procedurally generated shapes dataset.
fn desk_synthetic() -> TrainConfig {
    TrainConfig {
        dataset: "synthetic-shapes".into(),
        arch: "desk-cnn".into(),
        num_classes: 3,
        feature_dim: 64,
        num_labels: 30,
        total_steps: 4000,
        batch_size_labeled: 16,
        mu: 4,
        eta0: 0.03,
        w_s: 1.0,
        w_d: 0.0005,
        gamma: 7.0 / 8.0,
        eval_interval: 0,
        eval_batch_size: 200,
        synthetic_train_size: 6000,
        synthetic_test_size: 600,
        ..TrainConfig::default()
    }
}
