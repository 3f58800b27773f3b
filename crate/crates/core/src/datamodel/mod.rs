//! Domain types, manifests and deterministic input preprocessing.

mod manifest;
mod media;
mod preprocess;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, manifest_to_string, parse_manifest, write_manifest};
pub use media::{load_audio, load_image, load_mask, save_wav};
pub use preprocess::{
    preprocess_audio, preprocess_image, AudioPrepConfig, ImageNormalization, ImagePrepConfig,
    RawImage,
};

/// A mono waveform at a fixed sample rate with finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSegment {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite audio sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Channels-first `C×H×W` image tensor, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty image tensor {c}x{h}x{w}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    /// `(height, width)`
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.dim();
        (h, w)
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }
}

/// Box in pixel coordinates of the original image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Boxes(Vec<BoundingBox>),
    /// Path to an 8-bit grayscale image, 0 = background, 255 = foreground.
    Mask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Positive,
    NonAudible,
    NonVisible,
    Mismatched,
}

impl Polarity {
    pub fn is_positive(self) -> bool {
        self == Polarity::Positive
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub audio_path: String,
    pub annotation: Option<Annotation>,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub split: Split,
    /// Directory relative media paths are resolved against.
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, split: Split, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", r.id)));
            }
        }
        Ok(Self {
            records,
            split,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Sample order for one epoch. Test splits keep file order; train splits
    /// are shuffled by a stream keyed on `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        if self.split == Split::Train {
            shuffle_order(&mut order, seed, epoch);
        }
        order
    }
}

pub(crate) fn shuffle_order(order: &mut [usize], seed: u64, epoch: usize) {
    let key = crate::training::noise::mix_key(&[seed, 0x5E_ED0F_0DE5, epoch as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    order.shuffle(&mut rng);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: format!("{id}.png"),
            audio_path: format!("{id}.wav"),
            annotation: None,
            polarity: Polarity::Positive,
        }
    }

    #[test]
    fn audio_rejects_nan() {
        assert!(AudioSegment::new(vec![0.0, f64::NAN], 16000).is_err());
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let ds = Dataset::new(
            (0..20).map(|i| rec(&i.to_string())).collect(),
            Split::Train,
            ".",
        )
        .unwrap();
        let a = ds.epoch_order(7, 3);
        assert_eq!(a, ds.epoch_order(7, 3));
        assert_ne!(a, ds.epoch_order(7, 4));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn test_split_keeps_file_order() {
        let ds = Dataset::new(vec![rec("a"), rec("b"), rec("c")], Split::Test, ".").unwrap();
        assert_eq!(ds.epoch_order(1, 0), vec![0, 1, 2]);
    }
}
