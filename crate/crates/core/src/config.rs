//! Run configuration: one JSON document holding every tunable of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::LossConfig;
use crate::audio_embedder::PlaceholderTemplate;
use crate::datamodel::{AudioPrepConfig, ImagePrepConfig};
use crate::encoders::{BackendKind, Backends, PretrainedConfig, ToyConfig};
use crate::error::{Error, Result};
use crate::grounding::MaskerParams;
use crate::inference::InferenceConfig;
use crate::training::{TrainConfig, WeightDecayMode};

pub const SEED_ENV: &str = "AVLOC_SEED";
pub const RESOLVED_NAME: &str = "config.resolved.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub audio: AudioPrepConfig,
    pub image: ImagePrepConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub kind: BackendKind,
    pub toy: ToyConfig,
    pub pretrained: PretrainedConfig,
    pub template: PlaceholderTemplate,
}

/// Optimizer and loop settings. Loss and masker settings live in their own
/// sections and are merged by [`RunConfig::train_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub seed: u64,
    pub hidden_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            weight_decay_mode: t.weight_decay_mode,
            seed: t.seed,
            hidden_dim: t.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write an `epoch_XXX.ckpt` after every epoch, not only the final one.
    pub epoch_checkpoints: bool,
    pub per_sample_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            epoch_checkpoints: true,
            per_sample_csv: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backends: BackendsConfig,
    pub masker: MaskerParams,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub inference: InferenceConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parse without validating. Errors carry the dotted key path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." {
                "<root>".to_string()
            } else {
                key
            };
            Error::config(key, e.into_inner().to_string())
        })
    }

    /// Parse, apply the seed override from the environment and validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v.trim().parse().map_err(|_| {
                Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.audio.sample_rate == 0 {
            return Err(Error::config("data.audio.sample_rate", "must be positive"));
        }
        if !(self.data.audio.duration_secs > 0.0 && self.data.audio.duration_secs.is_finite()) {
            return Err(Error::config(
                "data.audio.duration_secs",
                "must be positive",
            ));
        }
        if self.data.image.size == 0 {
            return Err(Error::config("data.image.size", "must be positive"));
        }
        let norm = &self.data.image.normalization;
        if norm.std.iter().any(|s| s.is_nan() || *s <= 0.0)
            || norm.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::config(
                "data.image.normalization",
                "std must be positive, mean finite",
            ));
        }
        self.train_config().validate()?;
        self.inference.validate()?;
        if self.backends.kind == BackendKind::Toy {
            self.backends.toy.validate(self.data.image.size)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            weight_decay_mode: t.weight_decay_mode,
            seed: t.seed,
            hidden_dim: t.hidden_dim,
            loss: self.loss,
            masker: self.masker,
            template: self.backends.template.clone(),
        }
    }

    pub fn build_backends(&self) -> Result<Backends> {
        match self.backends.kind {
            BackendKind::Toy => Backends::toy(
                &self.backends.toy,
                self.data.image.size,
                self.data.audio.sample_rate,
            ),
            BackendKind::Pretrained => Backends::pretrained(&self.backends.pretrained),
        }
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Echo the fully resolved config into an output directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_pretty_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
