//! Synthetic planted-signal dataset: the sounding region of every pair is
//! known by construction.
//!
//! Class `k` owns image quadrant `k` (row-major over a 2×2 layout), painted in
//! a class colour over a noisy dark-gray background, and a pure tone at a
//! class-specific toy-spectrogram bin.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    preprocess_audio, preprocess_image, save_wav, Annotation, AudioPrepConfig, BoundingBox,
    Dataset, ImageNormalization, ImagePrepConfig, Polarity, RawImage, SampleRecord, Split,
};
use crate::encoders::{Backends, ToyConfig};
use crate::error::{Error, Result};
use crate::evaluation::AnnotationKind;
use crate::training::noise::mix_key;
use crate::training::PreparedSample;

pub const DEFAULT_COLOURS: [[f64; 3]; 4] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.95, 0.10],
    [0.10, 0.10, 0.95],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub pairs: usize,
    pub classes: usize,
    pub image_size: usize,
    pub sample_rate: u32,
    pub duration_secs: f64,
    pub background: f64,
    /// Patch colour of each class, RGB in `[0, 1]`.
    pub colours: Vec<[f64; 3]>,
    pub pixel_noise: f64,
    /// Toy-spectrogram bin of each class tone.
    pub tone_bins: Vec<usize>,
    pub tone_amplitude: f64,
    /// Relative amplitude jitter per clip.
    pub amplitude_jitter: f64,
    pub audio_noise: f64,
    pub normalization: ImageNormalization,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            pairs: 64,
            classes: 4,
            image_size: 64,
            sample_rate: 16_000,
            duration_secs: 10.0,
            background: 0.15,
            colours: DEFAULT_COLOURS.to_vec(),
            pixel_noise: 0.03,
            tone_bins: vec![3, 7, 12, 20],
            tone_amplitude: 0.5,
            amplitude_jitter: 0.2,
            audio_noise: 0.01,
            normalization: ImageNormalization::CENTERED,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    fn validate(&self, toy: &ToyConfig) -> Result<()> {
        if self.classes == 0 || self.classes > 4 {
            return Err(Error::InvalidInput(format!(
                "planted classes must be 1..=4, got {}",
                self.classes
            )));
        }
        if self.colours.len() < self.classes {
            return Err(Error::InvalidInput(
                "one patch colour per class is required".into(),
            ));
        }
        if self.tone_bins.len() < self.classes {
            return Err(Error::InvalidInput(
                "one tone bin per class is required".into(),
            ));
        }
        if let Some(b) = self.tone_bins.iter().find(|b| **b >= toy.n_bins) {
            return Err(Error::InvalidInput(format!(
                "tone bin {b} is outside the toy spectrogram"
            )));
        }
        if self.image_size < 2 || !self.image_size.is_multiple_of(2) {
            return Err(Error::InvalidInput(
                "planted image size must be even".into(),
            ));
        }
        Ok(())
    }

    pub fn audio_prep(&self) -> AudioPrepConfig {
        AudioPrepConfig {
            sample_rate: self.sample_rate,
            duration_secs: self.duration_secs,
        }
    }

    pub fn image_prep(&self) -> ImagePrepConfig {
        ImagePrepConfig {
            size: self.image_size,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedPair {
    pub id: String,
    pub class: usize,
    pub image: RawImage,
    pub audio: Vec<f64>,
    pub region: Array2<bool>,
    pub bbox: BoundingBox,
}

fn self_colour(cfg: &PlantedConfig, class: usize) -> [f64; 3] {
    cfg.colours[class]
}

/// Pixel bounds `(y0, y1, x0, x1)` of a class quadrant.
pub fn class_quadrant(class: usize, size: usize) -> (usize, usize, usize, usize) {
    let half = size / 2;
    let (qr, qc) = (class / 2, class % 2);
    (qr * half, (qr + 1) * half, qc * half, (qc + 1) * half)
}

pub fn planted_pairs(cfg: &PlantedConfig, toy: &ToyConfig) -> Result<Vec<PlantedPair>> {
    cfg.validate(toy)?;
    let n = cfg.image_size;
    let len = (cfg.sample_rate as f64 * cfg.duration_secs).round() as usize;
    let bin_hz = cfg.sample_rate as f64 / toy.n_fft as f64;
    let noise = Normal::new(0.0, cfg.audio_noise.max(0.0))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    (0..cfg.pairs)
        .map(|p| {
            let class = p % cfg.classes;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[cfg.seed, 0x91_A7, p as u64]));
            let (y0, y1, x0, x1) = class_quadrant(class, n);
            let colour = self_colour(cfg, class);
            let mut data = Vec::with_capacity(n * n * 3);
            let mut region = Array2::from_elem((n, n), false);
            for y in 0..n {
                for x in 0..n {
                    let inside = (y0..y1).contains(&y) && (x0..x1).contains(&x);
                    region[[y, x]] = inside;
                    for c in colour {
                        let base = if inside { c } else { cfg.background };
                        let jitter = rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise);
                        data.push((base + jitter).clamp(0.0, 1.0));
                    }
                }
            }
            let image = RawImage::new(n, n, 3, data)?;

            let freq = cfg.tone_bins[class] as f64 * bin_hz;
            let amp = cfg.tone_amplitude
                * (1.0 + rng.random_range(-cfg.amplitude_jitter..=cfg.amplitude_jitter));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let audio = (0..len)
                .map(|t| {
                    let s = amp
                        * (std::f64::consts::TAU * freq * t as f64 / cfg.sample_rate as f64
                            + phase)
                            .sin();
                    (s + noise.sample(&mut rng)).clamp(-1.0, 1.0)
                })
                .collect();
            Ok(PlantedPair {
                id: format!("planted_{p:03}"),
                class,
                image,
                audio,
                region,
                bbox: BoundingBox {
                    x_min: x0 as f64,
                    y_min: y0 as f64,
                    x_max: x1 as f64,
                    y_max: y1 as f64,
                },
            })
        })
        .collect()
}

/// Preprocess and encode planted pairs in memory.
pub fn prepare_planted(
    pairs: &[PlantedPair],
    cfg: &PlantedConfig,
    backends: &Backends,
) -> Result<Vec<PreparedSample>> {
    use rayon::prelude::*;
    pairs
        .par_iter()
        .map(|p| {
            let image = preprocess_image(&p.image, &cfg.image_prep())?;
            let audio = preprocess_audio(&p.audio, cfg.sample_rate, &cfg.audio_prep())?;
            PreparedSample::encode(p.id.clone(), image, &audio, backends)
        })
        .collect()
}

/// Write PNG frames, WAV clips and `manifest.jsonl` to `dir`, annotated with
/// the patch box or a pixel mask PNG.
pub fn write_planted(
    dir: &Path,
    pairs: &[PlantedPair],
    cfg: &PlantedConfig,
    kind: AnnotationKind,
) -> Result<Dataset> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (h, w) = p.image.size();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (p.image.get(y as usize, x as usize, c) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let image_path = format!("{}.png", p.id);
        let audio_path = format!("{}.wav", p.id);
        let ipath = dir.join(&image_path);
        img.save(&ipath)?;
        save_wav(dir.join(&audio_path), &p.audio, cfg.sample_rate)?;
        let annotation = match kind {
            AnnotationKind::Boxes => Annotation::Boxes(vec![p.bbox]),
            AnnotationKind::Mask => {
                let mask_path = format!("{}_mask.png", p.id);
                crate::grounding::binary_to_gray(&p.region).save(dir.join(&mask_path))?;
                Annotation::Mask(mask_path)
            }
        };
        records.push(SampleRecord {
            id: p.id.clone(),
            image_path,
            audio_path,
            annotation: Some(annotation),
            polarity: Polarity::Positive,
        });
    }
    let ds = Dataset::new(records, Split::Train, dir)?;
    crate::datamodel::write_manifest(&ds, dir.join("manifest.jsonl"))?;
    Ok(ds)
}
