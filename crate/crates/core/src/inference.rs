//! Single-pair localization with trained parameters.

use serde::{Deserialize, Serialize};

use crate::audio_embedder::{embed_audio, embed_features, PlaceholderTemplate, ProjectionParams};
use crate::datamodel::{AudioSegment, ImageTensor};
use crate::encoders::Backends;
use crate::error::{Error, Result};
use crate::evaluation::MetricFamily;
use crate::grounding::{inference_mask, InferenceRule, LocalizationMap, MaskerParams};
use crate::training::{Checkpoint, PreparedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub threshold: f64,
    pub inference_rule: InferenceRule,
    /// Metric families an evaluation must be able to report.
    pub require_metrics: Vec<MetricFamily>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            inference_rule: InferenceRule::BiasOverScale,
            require_metrics: Vec::new(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::config("inference.threshold", "must be finite"));
        }
        Ok(())
    }

    /// A threshold above 1 (or at/below 0) makes the binary map constant.
    pub fn threshold_is_degenerate(&self) -> bool {
        self.threshold > 1.0 || self.threshold <= 0.0
    }
}

pub struct Localizer<'a> {
    backends: &'a Backends,
    template: PlaceholderTemplate,
    projection: ProjectionParams,
    masker: MaskerParams,
    cfg: InferenceConfig,
}

impl<'a> Localizer<'a> {
    pub fn new(
        backends: &'a Backends,
        template: PlaceholderTemplate,
        projection: ProjectionParams,
        masker: MaskerParams,
        cfg: InferenceConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if projection.dims().0 != backends.audio.feature_dim()
            || projection.dims().2 != backends.tokens.token_dim()
        {
            return Err(Error::Shape(
                "projection network does not match the loaded backends".into(),
            ));
        }
        Ok(Self {
            backends,
            template,
            projection,
            masker,
            cfg,
        })
    }

    /// Trained `w`, `b` and projection from a checkpoint; the remaining
    /// masker settings come from the checkpoint's training config.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        backends: &'a Backends,
        cfg: InferenceConfig,
    ) -> Result<Self> {
        let digest = backends.digest();
        if ck.backend_digest != digest {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained against backends {} but {digest} are loaded",
                ck.backend_digest
            )));
        }
        let masker = MaskerParams {
            w: ck.params.w,
            b: ck.params.b,
            ..ck.config.masker
        };
        Self::new(
            backends,
            ck.config.template.clone(),
            ck.params.projection.clone(),
            masker,
            cfg,
        )
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    pub fn masker(&self) -> &MaskerParams {
        &self.masker
    }

    pub fn localize(&self, image: &ImageTensor, audio: &AudioSegment) -> Result<LocalizationMap> {
        self.localize_at(image, audio, image.size())
    }

    /// Maps upsampled to `out_size`, e.g. the original image resolution.
    pub fn localize_at(
        &self,
        image: &ImageTensor,
        audio: &AudioSegment,
        out_size: (usize, usize),
    ) -> Result<LocalizationMap> {
        let a = embed_audio(audio, &self.projection, self.backends, &self.template)?;
        let (_, spatial) = self.backends.image.encode(image)?;
        let logits = self.backends.grounder.ground(&spatial, &a.0)?;
        inference_mask(
            &logits,
            &self.masker,
            self.cfg.threshold,
            self.cfg.inference_rule,
            out_size,
        )
    }

    /// Same as [`Localizer::localize`] using cached encoder outputs.
    pub fn localize_prepared(&self, sample: &PreparedSample) -> Result<LocalizationMap> {
        let (a, _) = embed_features(
            &sample.audio,
            &self.projection,
            self.backends.tokens.as_ref(),
            &self.template,
        )?;
        let logits = self.backends.grounder.ground(&sample.spatial, &a.0)?;
        inference_mask(
            &logits,
            &self.masker,
            self.cfg.threshold,
            self.cfg.inference_rule,
            sample.image.size(),
        )
    }
}

/// Peak of a confidence map, used as the detection score.
pub fn confidence_score(map: &LocalizationMap) -> f64 {
    map.confidence.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ToyConfig;
    use ndarray::Array3;

    #[test]
    fn cached_and_direct_paths_agree() {
        let toy = ToyConfig::default();
        let backends = Backends::toy(&toy, 16, 16_000).unwrap();
        let image = ImageTensor::new(Array3::from_shape_fn((3, 16, 16), |(c, r, s)| {
            ((c + r * s) % 5) as f64 / 5.0
        }))
        .unwrap();
        let audio = AudioSegment::new(
            (0..16_000).map(|k| (k as f64 * 0.3).sin() * 0.5).collect(),
            16_000,
        )
        .unwrap();
        let loc = Localizer::new(
            &backends,
            PlaceholderTemplate::default(),
            ProjectionParams::init(16, 8, 16, 1),
            MaskerParams::default(),
            InferenceConfig::default(),
        )
        .unwrap();
        let direct = loc.localize(&image, &audio).unwrap();
        let prepared = PreparedSample::encode("x", image, &audio, &backends).unwrap();
        assert_eq!(loc.localize_prepared(&prepared).unwrap(), direct);
        assert_eq!(direct.confidence.dim(), (16, 16));
    }

    #[test]
    fn threshold_above_one_gives_empty_map() {
        let cfg = InferenceConfig {
            threshold: 1.01,
            ..InferenceConfig::default()
        };
        assert!(cfg.threshold_is_degenerate());
    }
}
