//! Decoding of media files referenced by manifests.

use std::path::Path;

use ndarray::Array2;

use super::preprocess::RawImage;
use crate::error::{Error, Result};

/// Load an image and drop any alpha channel.
pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let img = image::open(path.as_ref())?;
    Ok(RawImage::from_rgb8(&img.to_rgb8()))
}

/// Load an 8-bit grayscale mask; values above 127 count as foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

/// Load a WAV file as a mono waveform in `[-1, 1]` plus its sample rate.
/// Multi-channel input is averaged.
pub fn load_audio(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no audio samples",
            path.as_ref().display()
        )));
    }
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / frame.len() as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Write a mono 16-bit PCM WAV file.
pub fn save_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for s in samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
