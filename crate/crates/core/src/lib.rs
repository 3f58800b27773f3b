//! Audio-driven sound source localization.
//!
//! Audio is turned into a single continuous token that is spliced after a fixed
//! placeholder prompt and pushed through a frozen text encoder. The resulting
//! audio-driven embedding conditions a frozen grounder whose logit map feeds two
//! maskers: a straight-through binary image masker and a soft feature masker.
//! Training aligns masked visual embeddings with the audio embedding through two
//! symmetric InfoNCE terms plus an area prior. Only the audio projection network
//! and the two image-masker scalars are trainable.

pub mod alignment;
pub mod audio_embedder;
pub mod config;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod inference;
mod ops;
pub mod resample;
pub mod synth;
pub mod training;
pub mod visualize;

pub use alignment::{LossBreakdown, LossConfig, SimilarityMatrix};
pub use audio_embedder::{AudioDrivenEmbedding, PlaceholderTemplate, ProjectionParams};
pub use config::RunConfig;
pub use datamodel::{AudioSegment, Dataset, ImageTensor, Polarity, SampleRecord};
pub use encoders::Backends;
pub use error::{Error, Result};
pub use grounding::{FeatureMask, GrounderLogits, ImageMask, MaskerParams};
pub use inference::Localizer;
pub use training::{Checkpoint, TrainConfig};
