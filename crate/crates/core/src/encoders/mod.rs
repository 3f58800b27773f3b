//! Frozen backbone contracts: image encoder, audio encoder, token encoder and
//! grounder.
//!
//! Backbones never change during training. Each exposes the vector-Jacobian
//! products the trainable heads need (gradients with respect to *inputs*,
//! never parameters) and a digest of its parameters so callers can verify the
//! freeze.

mod pretrained;
mod toy;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{AudioSegment, ImageTensor};
use crate::error::{Error, Result};
use crate::grounding::GrounderLogits;

pub use pretrained::PretrainedConfig;
pub use toy::{ToyAudioEncoder, ToyConfig, ToyGrounder, ToyImageEncoder, ToyTokenEncoder};

/// `T×D_a` audio features, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    features: Array2<f64>,
}

impl AudioFeatureSequence {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Shape("audio feature sequence needs T >= 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite audio feature".into()));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// `c×h×w` spatial visual features.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialVisualFeatures {
    features: Array3<f64>,
}

impl SpatialVisualFeatures {
    pub fn new(features: Array3<f64>) -> Result<Self> {
        let (c, h, w) = features.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty spatial features {c}x{h}x{w}")));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Array3<f64> {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.features.dim();
        (h, w)
    }

    /// Feature vector at one cell.
    pub fn cell(&self, r: usize, s: usize) -> Array1<f64> {
        self.features.slice(ndarray::s![.., r, s]).to_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVisualEmbedding(pub Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(pub Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Id(u32),
    Continuous(Array1<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn continuous_slots(&self) -> impl Iterator<Item = (usize, &Array1<f64>)> {
        self.tokens.iter().enumerate().filter_map(|(i, t)| match t {
            Token::Continuous(v) => Some((i, v)),
            Token::Id(_) => None,
        })
    }
}

pub trait ImageEncoder: Send + Sync {
    /// Required `(height, width)` of input tensors.
    fn input_size(&self) -> (usize, usize);
    fn embed_dim(&self) -> usize;
    fn encode(&self, image: &ImageTensor)
        -> Result<(GlobalVisualEmbedding, SpatialVisualFeatures)>;
    fn encode_global(&self, image: &ImageTensor) -> Result<GlobalVisualEmbedding> {
        self.encode(image).map(|(g, _)| g)
    }
    /// Gradient of `<grad, encode_global(image)>` with respect to the pixels.
    fn global_vjp(&self, image: &ImageTensor, grad: &Array1<f64>) -> Result<Array3<f64>>;
    fn parameter_digest(&self) -> String;
}

pub trait AudioEncoder: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn encode(&self, audio: &AudioSegment) -> Result<AudioFeatureSequence>;
    fn parameter_digest(&self) -> String;
}

pub trait TokenEncoder: Send + Sync {
    fn context_length(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode(&self, tokens: &TokenSequence) -> Result<ContextEmbedding>;
    /// Gradients of `<grad, encode(tokens)>` with respect to each continuous
    /// token, in sequence order.
    fn continuous_vjp(
        &self,
        tokens: &TokenSequence,
        grad: &Array1<f64>,
    ) -> Result<Vec<Array1<f64>>>;
    fn parameter_digest(&self) -> String;
}

pub trait Grounder: Send + Sync {
    fn ground(
        &self,
        visual: &SpatialVisualFeatures,
        condition: &Array1<f64>,
    ) -> Result<GrounderLogits>;
    /// Gradient of `<grad, ground(visual, condition)>` with respect to `condition`.
    fn condition_vjp(
        &self,
        visual: &SpatialVisualFeatures,
        condition: &Array1<f64>,
        grad: &Array2<f64>,
    ) -> Result<Array1<f64>>;
    fn parameter_digest(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Pretrained,
}

/// The four frozen backbones used by one run.
pub struct Backends {
    pub image: Box<dyn ImageEncoder>,
    pub audio: Box<dyn AudioEncoder>,
    pub tokens: Box<dyn TokenEncoder>,
    pub grounder: Box<dyn Grounder>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("digest", &self.digest())
            .finish_non_exhaustive()
    }
}

impl Backends {
    pub fn toy(cfg: &ToyConfig, image_size: usize, sample_rate: u32) -> Result<Self> {
        cfg.validate(image_size)?;
        Ok(Self {
            image: Box::new(ToyImageEncoder::new(cfg, image_size)),
            audio: Box::new(ToyAudioEncoder::new(cfg, sample_rate)?),
            tokens: Box::new(ToyTokenEncoder::new(cfg)),
            grounder: Box::new(ToyGrounder::new(cfg)),
        })
    }

    pub fn pretrained(cfg: &PretrainedConfig) -> Result<Self> {
        pretrained::load(cfg)
    }

    /// Combined digest over all four backbones.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in [
            self.image.parameter_digest(),
            self.audio.parameter_digest(),
            self.tokens.parameter_digest(),
            self.grounder.parameter_digest(),
        ] {
            h.update(d.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// SHA-256 over the little-endian bytes of every value, tagged by name.
pub(crate) fn digest_arrays<'a>(name: &str, arrays: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for a in arrays {
        h.update((a.len() as u64).to_le_bytes());
        for v in a {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
