//! Confidence overlays: the confidence map is looked up in a fixed colormap and
//! blended half-and-half over the input image. Colormap index 0 is transparent.

mod colormap;

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

pub use colormap::JET;

use crate::error::{Error, Result};
use crate::grounding::load_map_tensor;
use crate::resample::resize_bilinear;

pub const OVERLAY_ALPHA: f64 = 0.5;

pub fn colormap_index(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn blend(under: u8, over: u8) -> u8 {
    (OVERLAY_ALPHA * over as f64 + (1.0 - OVERLAY_ALPHA) * under as f64).round() as u8
}

/// Overlay `confidence` (values in `[0, 1]`) on `image`. A map of another size
/// but the same aspect ratio is bilinearly resized first.
pub fn overlay(image: &RgbImage, confidence: &Array2<f64>) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (ch, cw) = confidence.dim();
    if ch == 0 || cw == 0 || h * cw != w * ch {
        return Err(Error::Shape(format!(
            "confidence map {ch}x{cw} does not match the aspect ratio of the {h}x{w} image"
        )));
    }
    if confidence.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite confidence value".into()));
    }
    let conf = if (ch, cw) == (h, w) {
        confidence.clone()
    } else {
        resize_bilinear(confidence.view(), (h, w))
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let Rgb(px) = *image.get_pixel(x, y);
        let idx = colormap_index(conf[[y as usize, x as usize]]);
        if idx == 0 {
            return Rgb(px);
        }
        let c = JET[idx];
        Rgb([blend(px[0], c[0]), blend(px[1], c[1]), blend(px[2], c[2])])
    }))
}

/// Read an image and an `AVCM` confidence tensor, write the overlay PNG.
pub fn overlay_files(image: &Path, confidence: &Path, out: &Path) -> Result<()> {
    let img = image::open(image)?.to_rgb8();
    let conf = load_map_tensor(confidence)?;
    overlay(&img, &conf)?.save(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> RgbImage {
        RgbImage::from_fn(6, 4, |x, y| Rgb([(x * 40) as u8, (y * 60) as u8, 200]))
    }

    #[test]
    fn zero_confidence_is_identity() {
        let out = overlay(&img(), &Array2::zeros((4, 6))).unwrap();
        assert_eq!(out, img());
    }

    #[test]
    fn full_confidence_is_even_blend_with_top_colour() {
        let out = overlay(&img(), &Array2::ones((2, 3))).unwrap();
        let top = JET[255];
        for (x, y, p) in out.enumerate_pixels() {
            let q = img().get_pixel(x, y).0;
            for c in 0..3 {
                let expected = ((q[c] as f64 + top[c] as f64) / 2.0).round() as u8;
                assert_eq!(p.0[c], expected);
            }
        }
    }

    #[test]
    fn gradient_peak_gets_top_colour() {
        let conf = Array2::from_shape_fn((4, 6), |(y, x)| (y * 6 + x) as f64 / 23.0);
        let out = overlay(&img(), &conf).unwrap();
        let q = img().get_pixel(5, 3).0;
        let top = JET[255];
        let expected: Vec<u8> = (0..3)
            .map(|c| (0.5 * top[c] as f64 + 0.5 * q[c] as f64).round() as u8)
            .collect();
        assert_eq!(out.get_pixel(5, 3).0.to_vec(), expected);
    }

    #[test]
    fn aspect_mismatch_is_rejected() {
        assert!(overlay(&img(), &Array2::zeros((4, 4))).is_err());
    }

    #[test]
    fn colormap_is_fixed() {
        assert_eq!(JET[0], [0, 0, 128]);
        assert_eq!(JET.len(), 256);
        assert_eq!(colormap_index(1.0), 255);
        assert_eq!(colormap_index(-3.0), 0);
    }
}
