use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{AudioSegment, ImageTensor};
use crate::error::{Error, Result};
use crate::resample::BilinearPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioPrepConfig {
    pub sample_rate: u32,
    pub duration_secs: f64,
}

impl Default for AudioPrepConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            duration_secs: 10.0,
        }
    }
}

impl AudioPrepConfig {
    pub fn target_len(&self) -> usize {
        (self.sample_rate as f64 * self.duration_secs).round() as usize
    }
}

/// Linear-interpolation resampler. Output length is `round(len * to / from)`.
fn resample_linear(input: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return input.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let out_len = ((input.len() as f64) * to as f64 / from as f64)
        .round()
        .max(1.0) as usize;
    let last = input.len() - 1;
    (0..out_len)
        .map(|k| {
            let pos = k as f64 * ratio;
            let i = (pos.floor() as usize).min(last);
            let j = (i + 1).min(last);
            let f = pos - i as f64;
            input[i] * (1.0 - f) + input[j] * f
        })
        .collect()
}

/// Resample to the configured rate, clip to `[-1, 1]`, then center-crop long
/// clips or tile short clips to exactly the configured duration.
pub fn preprocess_audio(
    raw: &[f64],
    source_rate: u32,
    cfg: &AudioPrepConfig,
) -> Result<AudioSegment> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if source_rate == 0 {
        return Err(Error::InvalidInput(
            "source sample rate must be positive".into(),
        ));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite audio sample".into()));
    }
    let target = cfg.target_len();
    if target == 0 {
        return Err(Error::InvalidInput(
            "configured duration yields zero samples".into(),
        ));
    }
    let resampled = resample_linear(raw, source_rate, cfg.sample_rate);
    let n = resampled.len();
    let fitted: Vec<f64> = if n >= target {
        let start = (n - target) / 2;
        resampled[start..start + target].to_vec()
    } else {
        (0..target).map(|k| resampled[k % n]).collect()
    };
    let clipped = fitted.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    AudioSegment::new(clipped, cfg.sample_rate)
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageNormalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ImageNormalization {
    pub const CLIP: Self = Self {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
    };

    /// Maps `[0, 1]` onto `[-1, 1]`.
    pub const CENTERED: Self = Self {
        mean: [0.5; 3],
        std: [0.5; 3],
    };
    pub const IDENTITY: Self = Self {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

impl Default for ImageNormalization {
    fn default() -> Self {
        Self::CLIP
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagePrepConfig {
    pub size: usize,
    pub normalization: ImageNormalization,
}

impl Default for ImagePrepConfig {
    fn default() -> Self {
        Self {
            size: 352,
            normalization: ImageNormalization::CLIP,
        }
    }
}

/// Decoded image, channels-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "raw image buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let channels = img.color().channel_count() as usize;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            1 => img.to_luma8().into_raw(),
            2 => img.to_luma_alpha8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            _ => img.to_rgba8().into_raw(),
        };
        Self {
            height: h,
            width: w,
            channels: channels.min(4),
            data: data.into_iter().map(|v| v as f64 / 255.0).collect(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Bilinear resize to `size × size` followed by per-channel normalization.
pub fn preprocess_image(raw: &RawImage, cfg: &ImagePrepConfig) -> Result<ImageTensor> {
    if raw.channels != 3 {
        return Err(Error::InvalidInput(format!(
            "expected a 3-channel image, got {} channels",
            raw.channels
        )));
    }
    if raw.height == 0 || raw.width == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if cfg.size == 0 {
        return Err(Error::InvalidInput("target size must be positive".into()));
    }
    let plan = BilinearPlan::new((raw.height, raw.width), (cfg.size, cfg.size));
    let mut out = Array3::<f64>::zeros((3, cfg.size, cfg.size));
    for c in 0..3 {
        let plane = Array2::from_shape_fn((raw.height, raw.width), |(y, x)| raw.get(y, x, c));
        let resized = plan.apply(plane.view());
        let (mean, std) = (cfg.normalization.mean[c], cfg.normalization.std[c]);
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&resized.mapv(|v| (v - mean) / std));
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / n as f64).collect()
    }

    #[test]
    fn conformant_audio_is_identity() {
        let cfg = AudioPrepConfig::default();
        let x: Vec<f64> = (0..160_000)
            .map(|i| ((i as f64) * 0.01).sin() * 0.9)
            .collect();
        let seg = preprocess_audio(&x, 16_000, &cfg).unwrap();
        assert_eq!(seg.samples(), &x[..]);
    }

    #[test]
    fn short_audio_is_tiled() {
        let cfg = AudioPrepConfig::default();
        let x = ramp(80_000);
        let seg = preprocess_audio(&x, 16_000, &cfg).unwrap();
        assert_eq!(seg.len(), 160_000);
        assert_eq!(&seg.samples()[..80_000], &x[..]);
        assert_eq!(&seg.samples()[80_000..], &x[..]);
    }

    #[test]
    fn long_audio_is_center_cropped() {
        let cfg = AudioPrepConfig::default();
        let n = 320_000;
        let x = ramp(n);
        let seg = preprocess_audio(&x, 16_000, &cfg).unwrap();
        // Oracle: the middle window of a ramp starts at (n - target) / 2.
        let start = (n - 160_000) / 2;
        assert_eq!(start, 80_000);
        for (k, v) in seg.samples().iter().enumerate() {
            assert_eq!(*v, (start + k) as f64 / n as f64);
        }
    }

    #[test]
    fn empty_audio_errors() {
        assert!(preprocess_audio(&[], 16_000, &AudioPrepConfig::default()).is_err());
    }

    #[test]
    fn resamples_to_target_rate() {
        let cfg = AudioPrepConfig::default();
        let x = vec![0.5; 80_000]; // 10 s at 8 kHz
        let seg = preprocess_audio(&x, 8_000, &cfg).unwrap();
        assert_eq!(seg.len(), 160_000);
        assert!(seg.samples().iter().all(|v| (*v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn clips_amplitude() {
        let cfg = AudioPrepConfig {
            sample_rate: 4,
            duration_secs: 1.0,
        };
        let seg = preprocess_audio(&[2.0, -3.0, 0.5, 1.0], 4, &cfg).unwrap();
        assert_eq!(seg.samples(), &[1.0, -1.0, 0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn audio_preprocessing_is_idempotent(
            len in 1usize..400,
            rate in prop_oneof![Just(8u32), Just(16u32), Just(22u32)],
            seed in 0u64..1000,
        ) {
            let cfg = AudioPrepConfig { sample_rate: 16, duration_secs: 10.0 };
            let x: Vec<f64> = (0..len).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 400.0) - 1.2).collect();
            let once = preprocess_audio(&x, rate, &cfg).unwrap();
            let twice = preprocess_audio(once.samples(), once.sample_rate(), &cfg).unwrap();
            prop_assert_eq!(once.samples().len(), cfg.target_len());
            prop_assert_eq!(once, twice);
        }
    }

    fn gray(h: usize, w: usize, v: f64) -> RawImage {
        RawImage::new(h, w, 3, vec![v; h * w * 3]).unwrap()
    }

    #[test]
    fn constant_gray_normalizes() {
        let cfg = ImagePrepConfig::default();
        let t = preprocess_image(&gray(352, 352, 0.5), &cfg).unwrap();
        for c in 0..3 {
            let expect = (0.5 - cfg.normalization.mean[c]) / cfg.normalization.std[c];
            assert!(t
                .pixels()
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn single_pixel_extends_to_constant() {
        let cfg = ImagePrepConfig {
            size: 352,
            normalization: ImageNormalization::IDENTITY,
        };
        let raw = RawImage::new(1, 1, 3, vec![0.2, 0.4, 0.6]).unwrap();
        let t = preprocess_image(&raw, &cfg).unwrap();
        assert_eq!(t.size(), (352, 352));
        for c in 0..3 {
            let v = [0.2, 0.4, 0.6][c];
            assert!(t
                .pixels()
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .all(|p| *p == v));
        }
    }

    /// Direct per-pixel evaluation of half-pixel bilinear sampling.
    fn bilinear_oracle(raw: &RawImage, c: usize, size: usize) -> Array2<f64> {
        let (h, w) = raw.size();
        let sample = |src: usize, dst: usize, d: usize| -> (usize, usize, f64) {
            let pos = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let lo = (pos as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, if lo == hi { 0.0 } else { pos - lo as f64 })
        };
        Array2::from_shape_fn((size, size), |(y, x)| {
            let (y0, y1, fy) = sample(h, size, y);
            let (x0, x1, fx) = sample(w, size, x);
            (1.0 - fy) * ((1.0 - fx) * raw.get(y0, x0, c) + fx * raw.get(y0, x1, c))
                + fy * ((1.0 - fx) * raw.get(y1, x0, c) + fx * raw.get(y1, x1, c))
        })
    }

    #[test]
    fn checkerboard_downsample_preserves_mean() {
        let n = 704;
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                data.extend([v, v, v]);
            }
        }
        let raw = RawImage::new(n, n, 3, data).unwrap();
        let cfg = ImagePrepConfig {
            size: 352,
            normalization: ImageNormalization::IDENTITY,
        };
        let t = preprocess_image(&raw, &cfg).unwrap();
        let oracle = bilinear_oracle(&raw, 0, 352);
        let out = t.pixels().index_axis(ndarray::Axis(0), 0);
        let max_err = out
            .iter()
            .zip(oracle.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12);
        assert!((out.mean().unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn non_rgb_rejected() {
        let raw = RawImage::new(4, 4, 1, vec![0.0; 16]).unwrap();
        assert!(preprocess_image(&raw, &ImagePrepConfig::default()).is_err());
    }

    #[test]
    fn image_preprocessing_is_deterministic() {
        let data: Vec<f64> = (0..37 * 23 * 3)
            .map(|i| ((i * 7919) % 255) as f64 / 255.0)
            .collect();
        let raw = RawImage::new(37, 23, 3, data).unwrap();
        let cfg = ImagePrepConfig::default();
        let a = preprocess_image(&raw, &cfg).unwrap();
        let b = preprocess_image(&raw, &cfg).unwrap();
        assert!(a
            .pixels()
            .iter()
            .zip(b.pixels().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
