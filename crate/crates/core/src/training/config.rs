//! Training settings and the flat `key = value` config file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segments::SegmentPolicy;
use crate::audio::SilenceRule;
use crate::error::{Error, IoContext, Result};
use crate::features::{FeatureConfig, FeatureKind, Standardization};
use crate::models::{Collapse, Family};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Keep the lowest-distance epoch so far and the last epoch.
    Best,
    /// Write every epoch.
    Every,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: Family,
    pub features: FeatureKind,
    pub feature_config: FeatureConfig,
    pub silence_rule: SilenceRule,
    pub standardize: Standardization,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Restart at this rate when validation loss never improves on epoch 1
    /// within the first `fallback_window` epochs.
    pub fallback_lr: Option<f64>,
    pub fallback_window: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed of the validation split drawn when the manifest has none.
    pub split_seed: u64,
    pub segment_policy: SegmentPolicy,
    pub eval_segments: usize,
    pub two_channel: bool,
    pub collapse: Collapse,
    /// Override of the recurrent hidden size.
    pub hidden: Option<usize>,
    pub checkpoint: CheckpointPolicy,
}

impl TrainConfig {
    pub fn defaults(model: Family) -> Self {
        let cnn = model.is_cnn();
        TrainConfig {
            model,
            features: FeatureKind::MfccD,
            feature_config: FeatureConfig::default(),
            silence_rule: SilenceRule::AbsOfSum,
            standardize: Standardization::PerBin,
            epochs: if cnn { 100 } else { 30 },
            batch_size: if cnn { 132 } else { 48 },
            lr: 1e-4,
            fallback_lr: Some(1e-5),
            fallback_window: 10,
            weight_decay: 0.01,
            seed: 0,
            split_seed: 0,
            segment_policy: if cnn {
                SegmentPolicy::TruncateRandom
            } else {
                SegmentPolicy::Full
            },
            eval_segments: 16,
            two_channel: false,
            collapse: Collapse::Mean,
            hidden: None,
            checkpoint: CheckpointPolicy::Best,
        }
    }

    pub const KEYS: [&'static str; 21] = [
        "model",
        "features",
        "frame_length",
        "hop",
        "center",
        "silence_rule",
        "standardize",
        "epochs",
        "batch_size",
        "lr",
        "fallback_lr",
        "fallback_window",
        "weight_decay",
        "seed",
        "split_seed",
        "segment_policy",
        "eval_segments",
        "two_channel",
        "collapse",
        "hidden",
        "checkpoint",
    ];

    /// Set one field from its text form. `model` is not settable here: it
    /// selects the defaults everything else starts from.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse '{v}'")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::InvalidArgument(format!("{key}: expected true|false, got '{v}'"))),
            }
        }
        match key {
            "model" => {
                let m: Family = value.parse()?;
                if m != self.model {
                    return Err(Error::InvalidArgument(format!(
                        "model is {} but config sets {m}",
                        self.model
                    )));
                }
            }
            "features" => self.features = value.parse()?,
            "frame_length" => self.feature_config.stft.frame_length = num(key, value)?,
            "hop" => self.feature_config.stft.hop = num(key, value)?,
            "center" => self.feature_config.stft.center = flag(key, value)?,
            "silence_rule" => self.silence_rule = value.parse()?,
            "standardize" => self.standardize = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "fallback_lr" => {
                self.fallback_lr = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "fallback_window" => self.fallback_window = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "split_seed" => self.split_seed = num(key, value)?,
            "segment_policy" => self.segment_policy = value.parse()?,
            "eval_segments" => self.eval_segments = num(key, value)?,
            "two_channel" => self.two_channel = flag(key, value)?,
            "collapse" => self.collapse = value.parse()?,
            "hidden" => {
                self.hidden = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "checkpoint" => {
                self.checkpoint = match value {
                    "best" => CheckpointPolicy::Best,
                    "every" => CheckpointPolicy::Every,
                    "none" => CheckpointPolicy::None,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "checkpoint: expected best|every|none, got '{value}'"
                        )))
                    }
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_segments", self.eval_segments),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{k} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr {} must be >= 0", self.lr)));
        }
        if let Some(f) = self.fallback_lr {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::InvalidArgument(format!("fallback_lr {f} must be > 0")));
            }
        }
        if self.model.is_cnn() && self.segment_policy != SegmentPolicy::TruncateRandom {
            return Err(Error::InvalidArgument(
                "the CNN takes fixed-width panes; segment_policy must be truncate_random".into(),
            ));
        }
        self.feature_config.stft.validate()
    }
}

/// Parsed `key = value` file. `#` starts a comment; a `version` key is
/// required.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", i + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if values.insert(k.clone(), v).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "config line {}: duplicate key '{k}'",
                    i + 1
                )));
            }
        }
        let version = values
            .remove("version")
            .ok_or_else(|| Error::InvalidArgument("config file has no version key".into()))?;
        if version != CONFIG_VERSION.to_string() {
            return Err(Error::InvalidArgument(format!(
                "config version {version} unsupported (expected {CONFIG_VERSION})"
            )));
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Defaults, then config-file entries, then explicit overrides (command-line
/// flags), later sources winning. `model` picks the family defaults and is
/// resolved the same way.
pub fn resolve(
    file: Option<&ConfigFile>,
    overrides: &[(String, String)],
    ignore_keys: &[&str],
) -> Result<TrainConfig> {
    let model_text = overrides
        .iter()
        .rev()
        .find(|(k, _)| k == "model")
        .map(|(_, v)| v.as_str())
        .or_else(|| file.and_then(|f| f.get("model")))
        .unwrap_or("bgru-ft");
    let mut cfg = TrainConfig::defaults(model_text.parse()?);
    if let Some(f) = file {
        for (k, v) in &f.values {
            if k == "model" || ignore_keys.contains(&k.as_str()) {
                continue;
            }
            cfg.set(k, v)?;
        }
    }
    for (k, v) in overrides {
        if k != "model" {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
