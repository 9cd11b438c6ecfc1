//! Experiment configuration: strict JSON with suggestions for typos.
//!
//! Unknown keys are rejected (with a nearest-match hint) before type checks
//! run, so a misspelled hyperparameter can never silently fall back to its
//! default. Only `dataset`, `model_name`, `init_cls`, and `increment` are
//! required; everything else has a documented default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::FeatureConfig;
use crate::learner::HyperParams;
use crate::scenario::DEFAULT_SEED;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("unknown config key {key:?}{}{}", section_label(.section), suggestion_label(.suggestion))]
    UnknownKey {
        key: String,
        section: Option<&'static str>,
        suggestion: Option<String>,
    },
    #[error("missing required config key {0:?}")]
    MissingKey(String),
    #[error("config key {path}: {message}")]
    Type { path: String, message: String },
    #[error("config key {key:?}: {message}")]
    Invalid { key: &'static str, message: String },
}

fn section_label(section: &Option<&'static str>) -> String {
    section.map_or(String::new(), |s| format!(" in section {s:?}"))
}

fn suggestion_label(suggestion: &Option<String>) -> String {
    suggestion
        .as_ref()
        .map_or(String::new(), |s| format!("; did you mean {s:?}?"))
}

/// Synthetic-dataset shape, used when `dataset` is `"synthetic"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 20,
            test_per_class: 10,
        }
    }
}

/// One experiment, end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset registry key.
    pub dataset: String,
    /// Manifest CSV for the manifest-backed datasets.
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    /// Learner registry key.
    pub model_name: String,
    /// Replay buffer capacity; 0 is legal only for buffer-free learners.
    #[serde(default)]
    pub memory_size: usize,
    /// Classes in the initial task.
    pub init_cls: usize,
    /// Classes added per incremental task.
    pub increment: usize,
    #[serde(default = "default_convnet")]
    pub convnet_type: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub isfew_shot: bool,
    #[serde(default = "default_kshot")]
    pub kshot: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub hyperparameters: HyperParams,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_convnet() -> String {
    "tiny-cnn".to_string()
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_kshot() -> usize {
    5
}

fn default_epochs() -> usize {
    10
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_batch_size() -> usize {
    16
}

impl ExperimentConfig {
    /// Parses and validates an inline JSON document.
    pub fn from_json_str(doc: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(doc).map_err(|e| ConfigError::Json(e.to_string()))?;
        reject_unknown_keys(&value)?;
        for required in ["dataset", "model_name", "init_cls", "increment"] {
            if value.get(required).is_none() {
                return Err(ConfigError::MissingKey(required.to_string()));
            }
        }
        let deserializer = value.clone();
        let config: ExperimentConfig =
            serde_path_to_error::deserialize(&deserializer).map_err(|e| ConfigError::Type {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Parses and validates a config file.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&doc)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &'static str, message: String| ConfigError::Invalid { key, message };
        if self.init_cls == 0 {
            return Err(invalid("init_cls", "must be positive".into()));
        }
        if self.increment == 0 {
            return Err(invalid("increment", "must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(invalid("learning_rate", "must be positive".into()));
        }
        if self.isfew_shot && self.kshot == 0 {
            return Err(invalid("kshot", "must be positive in few-shot runs".into()));
        }
        self.features
            .validate()
            .map_err(|e| invalid("features", e.to_string()))?;
        self.hyperparameters
            .validate()
            .map_err(|e| invalid("hyperparameters", e.to_string()))?;
        if self.synthetic.num_classes < 2 {
            return Err(invalid("synthetic.num_classes", "need at least 2".into()));
        }
        if self.synthetic.train_per_class == 0 || self.synthetic.test_per_class == 0 {
            return Err(invalid(
                "synthetic",
                "per-class counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Keys of a section, derived from serializing its default value so the
/// lists can never drift from the structs.
fn known_keys(sample: &serde_json::Value) -> Vec<String> {
    sample
        .as_object()
        .map(|o| o.keys().cloned().collect())
        .unwrap_or_default()
}

fn reject_unknown_keys(value: &serde_json::Value) -> Result<(), ConfigError> {
    let Some(top) = value.as_object() else {
        return Err(ConfigError::Json("top level must be an object".into()));
    };
    let reference = serde_json::to_value(ExperimentConfig {
        dataset: String::new(),
        manifest_path: None,
        model_name: String::new(),
        memory_size: 0,
        init_cls: 1,
        increment: 1,
        convnet_type: default_convnet(),
        seed: DEFAULT_SEED,
        isfew_shot: false,
        kshot: 1,
        epochs: 1,
        learning_rate: 0.1,
        batch_size: 1,
        features: FeatureConfig::default(),
        hyperparameters: HyperParams::default(),
        synthetic: SyntheticConfig::default(),
        output_dir: None,
    })
    .expect("config serializes");
    check_section(top, &known_keys(&reference), None)?;

    let sections: [(&'static str, serde_json::Value); 3] = [
        (
            "features",
            serde_json::to_value(FeatureConfig::default()).expect("serializes"),
        ),
        (
            "hyperparameters",
            serde_json::to_value(HyperParams::default()).expect("serializes"),
        ),
        (
            "synthetic",
            serde_json::to_value(SyntheticConfig::default()).expect("serializes"),
        ),
    ];
    for (name, sample) in sections {
        if let Some(section) = value.get(name) {
            let Some(obj) = section.as_object() else {
                return Err(ConfigError::Type {
                    path: name.to_string(),
                    message: "must be an object".into(),
                });
            };
            check_section(obj, &known_keys(&sample), Some(name))?;
        }
    }
    Ok(())
}

fn check_section(
    object: &serde_json::Map<String, serde_json::Value>,
    known: &[String],
    section: Option<&'static str>,
) -> Result<(), ConfigError> {
    for key in object.keys() {
        if !known.iter().any(|k| k == key) {
            let suggestion = known
                .iter()
                .map(|k| (edit_distance(key, k), k))
                .min()
                .filter(|(d, _)| *d <= 3)
                .map(|(_, k)| k.clone());
            return Err(ConfigError::UnknownKey {
                key: key.clone(),
                section,
                suggestion,
            });
        }
    }
    Ok(())
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
