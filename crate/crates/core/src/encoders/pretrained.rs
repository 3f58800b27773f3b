//! Adapters for externally supplied pretrained backbones.
//!
//! This build ships no inference runtime for the pretrained image, audio,
//! text and segmentation networks. The configuration surface is stable so
//! runs can name their weight files; loading reports which pieces are missing
//! and fails with [`Error::BackendUnavailable`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::Backends;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainedConfig {
    pub image_encoder_weights: Option<PathBuf>,
    pub audio_encoder_weights: Option<PathBuf>,
    pub text_encoder_weights: Option<PathBuf>,
    pub grounder_weights: Option<PathBuf>,
}

impl PretrainedConfig {
    fn entries(&self) -> [(&'static str, &Option<PathBuf>); 4] {
        [
            ("image_encoder_weights", &self.image_encoder_weights),
            ("audio_encoder_weights", &self.audio_encoder_weights),
            ("text_encoder_weights", &self.text_encoder_weights),
            ("grounder_weights", &self.grounder_weights),
        ]
    }

    pub fn missing(&self) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .filter(|(_, p)| !p.as_ref().is_some_and(|p| p.exists()))
            .map(|(k, _)| k)
            .collect()
    }
}

pub(super) fn load(cfg: &PretrainedConfig) -> Result<Backends> {
    let missing = cfg.missing();
    if !missing.is_empty() {
        return Err(Error::BackendUnavailable(format!(
            "pretrained weights not found for: {}",
            missing.join(", ")
        )));
    }
    Err(Error::BackendUnavailable(
        "pretrained backbone runtime is not compiled into this build".into(),
    ))
}
