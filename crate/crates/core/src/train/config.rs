use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::data::{AugmentPolicy, LoadOptions, Normalization, SplitKind};
use crate::error::{config_err, Error, Result};
use crate::fusion::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    KFold,
    HoldOut,
    /// Train on every sample and validate on the training set.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub protocol: Protocol,
    pub k: usize,
    pub train_fraction: f64,
    /// k-fold round whose held-out fold is the validation/test fold.
    pub round: usize,
    pub subject_disjoint: bool,
    /// Share of the training fold held back for model selection under the
    /// hold-out protocol.
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::KFold,
            k: 10,
            train_fraction: 0.8,
            round: 0,
            subject_disjoint: false,
            validation_fraction: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn kind(&self) -> Option<SplitKind> {
        match self.protocol {
            Protocol::KFold => Some(SplitKind::KFold(self.k)),
            Protocol::HoldOut => Some(SplitKind::HoldOut(self.train_fraction)),
            Protocol::None => None,
        }
    }
}

/// Everything a training run depends on. Loaded from TOML; every field has a
/// default, so a file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset_root: Option<PathBuf>,
    /// Overrides `model.num_classes`.
    pub num_classes: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub augment: AugmentPolicy,
    pub freeze_backbones: bool,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub loading: LoadOptions,
    /// Weights to start from (for example pretrained backbones).
    pub init_from: Option<PathBuf>,
    /// Load only the parameter names shared with `init_from`.
    pub partial_init: bool,
    /// Continue from a saved `last.ckpt`, restoring optimizer state and history.
    pub resume_from: Option<PathBuf>,
    pub cache_images: bool,
    pub eval_batch_size: usize,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::kmu_fed()
    }
}

impl TrainConfig {
    /// KMU-FED settings: 6 classes, batch 128, lr 1e-3, 90 epochs, 10-fold.
    pub fn kmu_fed() -> Self {
        Self {
            dataset_root: None,
            num_classes: 6,
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 90,
            seed: 42,
            optimizer: AdamConfig::default(),
            augment: AugmentPolicy::default(),
            freeze_backbones: false,
            split: SplitConfig::default(),
            model: ModelConfig::with_classes(6),
            normalization: Normalization::default(),
            loading: LoadOptions::default(),
            init_from: None,
            partial_init: false,
            resume_from: None,
            cache_images: true,
            eval_batch_size: 16,
            eval_every: 1,
        }
    }

    /// KDEF settings: 7 classes, batch 32, lr 1e-4, 400 epochs, 80:20 hold-out.
    pub fn kdef() -> Self {
        Self {
            num_classes: 7,
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 400,
            split: SplitConfig {
                protocol: Protocol::HoldOut,
                ..SplitConfig::default()
            },
            model: ModelConfig::with_classes(7),
            ..Self::kmu_fed()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "kmu_fed" | "kmufed" => Ok(Self::kmu_fed()),
            "kdef" => Ok(Self::kdef()),
            other => Err(config_err!("unknown preset {other:?} (expected kmu_fed or kdef)")),
        }
    }

    /// Model configuration with `num_classes` applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if self.eval_batch_size == 0 || self.eval_every == 0 {
            return Err(config_err!("eval_batch_size and eval_every must be at least 1"));
        }
        let s = &self.split;
        if s.protocol == Protocol::KFold && s.round >= s.k {
            return Err(config_err!("split round {} out of range for k = {}", s.round, s.k));
        }
        if !(s.validation_fraction > 0.0 && s.validation_fraction < 1.0) {
            return Err(config_err!("validation_fraction must be in (0, 1)"));
        }
        self.optimizer.validate()?;
        self.normalization.validate()?;
        self.model_config().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(config_err!("config file {} does not exist", path.display()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Sets dotted keys such as `learning_rate` or `split.k`. Unknown keys and
    /// ill-typed values are config errors.
    pub fn with_overrides(&self, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self)?;
        for (key, value) in overrides {
            set_dotted(&mut doc, key, value.clone())?;
        }
        let out: Self = doc.try_into().map_err(|e: toml::de::Error| config_err!("{e}"))?;
        // reject keys that serde silently ignored
        let round_trip = toml::Value::try_from(&out)?;
        for (key, value) in overrides {
            match get_dotted(&round_trip, key) {
                Some(v) if values_agree(v, value) => {}
                _ => return Err(config_err!("unknown or ill-typed config key {key} = {value}")),
            }
        }
        Ok(out)
    }
}

fn values_agree(a: &toml::Value, b: &toml::Value) -> bool {
    match (a, b) {
        (toml::Value::Float(x), toml::Value::Integer(y)) => *x == *y as f64,
        _ => a == b,
    }
}

fn get_dotted<'a>(doc: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(doc, |node, part| node.get(part))
}

fn set_dotted(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| config_err!("empty override key"))?;
    let mut node = doc;
    for part in path {
        let table = node.as_table_mut().ok_or_else(|| config_err!("{key}: {part} is not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| config_err!("{key}: parent is not a table"))?;
    // integers given for float fields are widened by serde on the way back
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value` with the value read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| config_err!("override {text:?} is not key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}
