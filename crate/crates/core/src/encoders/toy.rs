//! Seeded linear stand-ins for the four backbones.
//!
//! * Image: per-patch channel means on a `g×g` grid, projected by a fixed
//!   `c×3` matrix; the global embedding projects the spatial mean of those
//!   features.
//! * Audio: per-hop magnitude spectrum (mean over `n_fft` sub-windows, scaled
//!   so a unit sine on bin `k` gives exactly `e_k`), projected by a fixed
//!   `D_a×n_bins` matrix.
//! * Tokens: sum of a lookup row per discrete id plus a fixed linear map of
//!   every continuous token.
//! * Grounder: `logit[r, s] = scale * <condition, v[:, r, s]>`.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{
    digest_arrays, AudioEncoder, AudioFeatureSequence, ContextEmbedding, GlobalVisualEmbedding,
    Grounder, ImageEncoder, SpatialVisualFeatures, Token, TokenEncoder, TokenSequence,
};
use crate::datamodel::{AudioSegment, ImageTensor};
use crate::error::{Error, Result};
use crate::grounding::GrounderLogits;
use crate::training::noise::mix_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    /// Patch grid side `g`; also the grounder resolution.
    pub grid: usize,
    /// Shared dimension of spatial features, global embeddings and context embeddings.
    pub embed_dim: usize,
    pub audio_feature_dim: usize,
    pub hop_seconds: f64,
    pub n_fft: usize,
    pub n_bins: usize,
    pub token_dim: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub grounder_scale: f64,
    /// Scale of the continuous-token map relative to a unit-variance fan-in draw.
    pub token_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: 8,
            embed_dim: 16,
            audio_feature_dim: 16,
            hop_seconds: 0.5,
            n_fft: 160,
            n_bins: 32,
            token_dim: 16,
            vocab_size: 64,
            context_length: 77,
            grounder_scale: 10.0,
            token_gain: 4.0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let key = |k: &str| format!("backends.toy.{k}");
        let positive = [
            ("grid", self.grid),
            ("embed_dim", self.embed_dim),
            ("audio_feature_dim", self.audio_feature_dim),
            ("n_fft", self.n_fft),
            ("n_bins", self.n_bins),
            ("token_dim", self.token_dim),
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(key(name), "must be positive"));
            }
        }
        if self.grid > image_size {
            return Err(Error::config(key("grid"), "grid exceeds image size"));
        }
        if self.n_bins > self.n_fft / 2 + 1 {
            return Err(Error::config(
                key("n_bins"),
                "more bins than the FFT provides",
            ));
        }
        if self.hop_seconds.is_nan() || self.hop_seconds <= 0.0 {
            return Err(Error::config(key("hop_seconds"), "must be positive"));
        }
        if !self.grounder_scale.is_finite() || self.grounder_scale <= 0.0 {
            return Err(Error::config(key("grounder_scale"), "must be positive"));
        }
        if !self.token_gain.is_finite() {
            return Err(Error::config(key("token_gain"), "must be finite"));
        }
        Ok(())
    }
}

/// Seeded `N(0, scale²)` matrix; `stream` separates independent matrices.
fn seeded_matrix(rows: usize, cols: usize, seed: u64, stream: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[seed, 0x70_7E, stream]));
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// Splits `n` into `parts` contiguous ranges with floor boundaries.
fn partition(n: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|k| (k * n / parts, (k + 1) * n / parts))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    size: usize,
    grid: usize,
    /// `c×3`
    patch_proj: Array2<f64>,
    /// `D×c`
    global_proj: Array2<f64>,
}

impl ToyImageEncoder {
    pub fn new(cfg: &ToyConfig, image_size: usize) -> Self {
        let c = cfg.embed_dim;
        Self {
            size: image_size,
            grid: cfg.grid,
            patch_proj: seeded_matrix(c, 3, cfg.seed, 1, 1.0 / 3f64.sqrt()),
            global_proj: seeded_matrix(c, c, cfg.seed, 2, 1.0 / (c as f64).sqrt()),
        }
    }

    pub fn patch_proj(&self) -> &Array2<f64> {
        &self.patch_proj
    }

    pub fn global_proj(&self) -> &Array2<f64> {
        &self.global_proj
    }

    fn check(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != 3 || image.size() != (self.size, self.size) {
            let (h, w) = image.size();
            return Err(Error::Shape(format!(
                "toy image encoder expects 3x{0}x{0}, got {1}x{h}x{w}",
                self.size,
                image.channels()
            )));
        }
        Ok(())
    }

    /// `3×g×g` per-patch channel means.
    pub fn patch_means(&self, image: &ImageTensor) -> Array3<f64> {
        let rows = partition(self.size, self.grid);
        let px = image.pixels();
        let mut out = Array3::<f64>::zeros((3, self.grid, self.grid));
        for (gr, &(r0, r1)) in rows.iter().enumerate() {
            for (gc, &(c0, c1)) in rows.iter().enumerate() {
                let count = ((r1 - r0) * (c1 - c0)) as f64;
                for ch in 0..3 {
                    out[[ch, gr, gc]] = px.slice(s![ch, r0..r1, c0..c1]).sum() / count;
                }
            }
        }
        out
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn input_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn embed_dim(&self) -> usize {
        self.global_proj.nrows()
    }

    fn encode(
        &self,
        image: &ImageTensor,
    ) -> Result<(GlobalVisualEmbedding, SpatialVisualFeatures)> {
        self.check(image)?;
        let means = self.patch_means(image);
        let g = self.grid;
        let flat = means.into_shape_with_order((3, g * g)).expect("contiguous");
        let spatial = self.patch_proj.dot(&flat);
        let spatial_mean = spatial.mean_axis(Axis(1)).expect("nonempty grid");
        let global = self.global_proj.dot(&spatial_mean);
        let c = spatial.nrows();
        let spatial = spatial
            .into_shape_with_order((c, g, g))
            .expect("contiguous");
        Ok((
            GlobalVisualEmbedding(global),
            SpatialVisualFeatures::new(spatial)?,
        ))
    }

    fn global_vjp(&self, image: &ImageTensor, grad: &Array1<f64>) -> Result<Array3<f64>> {
        self.check(image)?;
        if grad.len() != self.embed_dim() {
            return Err(Error::Shape("global gradient has wrong dimension".into()));
        }
        let g = self.grid;
        // d spatial_mean -> every cell gets 1/g² of it -> back through the patch projection.
        let d_mean = self.global_proj.t().dot(grad);
        let d_rgb = self.patch_proj.t().dot(&d_mean) / (g * g) as f64;
        let rows = partition(self.size, g);
        let mut out = Array3::<f64>::zeros((3, self.size, self.size));
        for &(r0, r1) in &rows {
            for &(c0, c1) in &rows {
                let count = ((r1 - r0) * (c1 - c0)) as f64;
                for ch in 0..3 {
                    out.slice_mut(s![ch, r0..r1, c0..c1])
                        .fill(d_rgb[ch] / count);
                }
            }
        }
        Ok(out)
    }

    fn parameter_digest(&self) -> String {
        digest_arrays(
            "toy-image",
            [
                self.patch_proj.as_slice().expect("contiguous"),
                self.global_proj.as_slice().expect("contiguous"),
                &[self.size as f64, self.grid as f64],
            ],
        )
    }
}

pub struct ToyAudioEncoder {
    sample_rate: u32,
    hop: usize,
    n_fft: usize,
    n_bins: usize,
    /// `D_a×n_bins`
    proj: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ToyAudioEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyAudioEncoder")
            .field("sample_rate", &self.sample_rate)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .field("n_bins", &self.n_bins)
            .finish_non_exhaustive()
    }
}

impl ToyAudioEncoder {
    pub fn new(cfg: &ToyConfig, sample_rate: u32) -> Result<Self> {
        let hop = (cfg.hop_seconds * sample_rate as f64).round() as usize;
        if hop < cfg.n_fft {
            return Err(Error::config(
                "backends.toy.hop_seconds",
                "hop shorter than n_fft",
            ));
        }
        Ok(Self {
            sample_rate,
            hop,
            n_fft: cfg.n_fft,
            n_bins: cfg.n_bins,
            proj: seeded_matrix(cfg.audio_feature_dim, cfg.n_bins, cfg.seed, 3, 1.0),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.proj
    }

    /// Frequency in Hz of bin `k`.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.n_fft as f64
    }

    pub fn hop_samples(&self) -> usize {
        self.hop
    }

    /// Mean scaled magnitude spectrum of one hop-sized frame.
    pub fn frame_spectrum(&self, frame: &[f64]) -> Array1<f64> {
        let windows = frame.len() / self.n_fft;
        let mut acc = Array1::<f64>::zeros(self.n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for w in 0..windows {
            for (b, x) in buf
                .iter_mut()
                .zip(&frame[w * self.n_fft..(w + 1) * self.n_fft])
            {
                *b = Complex::new(*x, 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..self.n_bins {
                let scale = if k == 0 || 2 * k == self.n_fft {
                    1.0
                } else {
                    2.0
                };
                acc[k] += buf[k].norm() * scale / self.n_fft as f64;
            }
        }
        acc / windows as f64
    }
}

impl AudioEncoder for ToyAudioEncoder {
    fn feature_dim(&self) -> usize {
        self.proj.nrows()
    }

    fn encode(&self, audio: &AudioSegment) -> Result<AudioFeatureSequence> {
        if audio.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "toy audio encoder expects {} Hz, got {} Hz",
                self.sample_rate,
                audio.sample_rate()
            )));
        }
        let t = audio.len() / self.hop;
        if t == 0 {
            return Err(Error::InvalidInput("audio shorter than one hop".into()));
        }
        let mut out = Array2::<f64>::zeros((t, self.proj.nrows()));
        for (i, frame) in audio.samples().chunks_exact(self.hop).enumerate() {
            let spec = self.frame_spectrum(frame);
            out.row_mut(i).assign(&self.proj.dot(&spec));
        }
        AudioFeatureSequence::new(out)
    }

    fn parameter_digest(&self) -> String {
        digest_arrays(
            "toy-audio",
            [
                self.proj.as_slice().expect("contiguous"),
                &[self.sample_rate as f64, self.hop as f64, self.n_fft as f64],
            ],
        )
    }
}

#[derive(Debug, Clone)]
pub struct ToyTokenEncoder {
    context_length: usize,
    /// `V×D`
    vocab: Array2<f64>,
    /// `D×D_tok`
    token_map: Array2<f64>,
}

impl ToyTokenEncoder {
    pub fn new(cfg: &ToyConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            context_length: cfg.context_length,
            vocab: seeded_matrix(cfg.vocab_size, d, cfg.seed, 4, 1.0 / (d as f64).sqrt()),
            token_map: seeded_matrix(
                d,
                cfg.token_dim,
                cfg.seed,
                5,
                cfg.token_gain / (cfg.token_dim as f64).sqrt(),
            ),
        }
    }

    pub fn vocab_row(&self, id: u32) -> Array1<f64> {
        self.vocab.row(id as usize).to_owned()
    }

    pub fn token_map(&self) -> &Array2<f64> {
        &self.token_map
    }
}

impl TokenEncoder for ToyTokenEncoder {
    fn context_length(&self) -> usize {
        self.context_length
    }

    fn token_dim(&self) -> usize {
        self.token_map.ncols()
    }

    fn embed_dim(&self) -> usize {
        self.token_map.nrows()
    }

    fn encode(&self, tokens: &TokenSequence) -> Result<ContextEmbedding> {
        if tokens.len() > self.context_length {
            return Err(Error::InvalidInput(format!(
                "token sequence of length {} exceeds context length {}",
                tokens.len(),
                self.context_length
            )));
        }
        let mut out = Array1::<f64>::zeros(self.embed_dim());
        for t in &tokens.tokens {
            match t {
                Token::Id(id) => {
                    if *id as usize >= self.vocab.nrows() {
                        return Err(Error::InvalidInput(format!(
                            "token id {id} outside vocabulary"
                        )));
                    }
                    out += &self.vocab.row(*id as usize);
                }
                Token::Continuous(v) => {
                    if v.len() != self.token_dim() {
                        return Err(Error::Shape(format!(
                            "continuous token has dim {}, expected {}",
                            v.len(),
                            self.token_dim()
                        )));
                    }
                    out += &self.token_map.dot(v);
                }
            }
        }
        Ok(ContextEmbedding(out))
    }

    fn continuous_vjp(
        &self,
        tokens: &TokenSequence,
        grad: &Array1<f64>,
    ) -> Result<Vec<Array1<f64>>> {
        if grad.len() != self.embed_dim() {
            return Err(Error::Shape("context gradient has wrong dimension".into()));
        }
        let g = self.token_map.t().dot(grad);
        Ok(tokens.continuous_slots().map(|_| g.clone()).collect())
    }

    fn parameter_digest(&self) -> String {
        digest_arrays(
            "toy-tokens",
            [
                self.vocab.as_slice().expect("contiguous"),
                self.token_map.as_slice().expect("contiguous"),
                &[self.context_length as f64],
            ],
        )
    }
}

#[derive(Debug, Clone)]
pub struct ToyGrounder {
    scale: f64,
}

impl ToyGrounder {
    pub fn new(cfg: &ToyConfig) -> Self {
        Self {
            scale: cfg.grounder_scale,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn check(visual: &SpatialVisualFeatures, condition: &Array1<f64>) -> Result<()> {
        if visual.channels() != condition.len() {
            return Err(Error::Shape(format!(
                "condition dim {} does not match feature dim {}",
                condition.len(),
                visual.channels()
            )));
        }
        Ok(())
    }
}

impl Grounder for ToyGrounder {
    fn ground(
        &self,
        visual: &SpatialVisualFeatures,
        condition: &Array1<f64>,
    ) -> Result<GrounderLogits> {
        Self::check(visual, condition)?;
        let (h, w) = visual.grid();
        let f = visual.features();
        let mut out = Array2::<f64>::zeros((h, w));
        for (k, ck) in condition.iter().enumerate() {
            out.scaled_add(self.scale * ck, &f.index_axis(Axis(0), k));
        }
        GrounderLogits::new(out)
    }

    fn condition_vjp(
        &self,
        visual: &SpatialVisualFeatures,
        condition: &Array1<f64>,
        grad: &Array2<f64>,
    ) -> Result<Array1<f64>> {
        Self::check(visual, condition)?;
        if grad.dim() != visual.grid() {
            return Err(Error::Shape("logit gradient has wrong resolution".into()));
        }
        let f = visual.features();
        Ok(Array1::from_shape_fn(condition.len(), |k| {
            self.scale * (&f.index_axis(Axis(0), k) * grad).sum()
        }))
    }

    fn parameter_digest(&self) -> String {
        digest_arrays("toy-grounder", [&[self.scale][..]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cfg() -> ToyConfig {
        ToyConfig::default()
    }

    fn image_from(f: impl Fn(usize, usize, usize) -> f64, size: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            f(c, y, x)
        }))
        .unwrap()
    }

    #[test]
    fn zero_image_gives_zero_embeddings() {
        let enc = ToyImageEncoder::new(&cfg(), 64);
        let (g, s) = enc.encode(&image_from(|_, _, _| 0.0, 64)).unwrap();
        assert!(g.0.iter().all(|v| *v == 0.0));
        assert!(s.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bright_patch_maximizes_feature_norm_at_its_cell() {
        let enc = ToyImageEncoder::new(&cfg(), 64);
        // Grid cell (2,3) of an 8x8 grid on 64px spans rows 16..24, cols 24..32.
        let img = image_from(
            |_, y, x| {
                if (16..24).contains(&y) && (24..32).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            },
            64,
        );
        let (_, s) = enc.encode(&img).unwrap();
        // Oracle: patch means are (1,1,1) at (2,3) and zero elsewhere, so the
        // feature there is the row-sum of the projection and zero elsewhere.
        let expected = enc.patch_proj().sum_axis(Axis(1));
        let cell = s.cell(2, 3);
        assert!((&cell - &expected).iter().all(|d| d.abs() < 1e-12));
        let mut best = (0, 0, -1.0);
        for r in 0..8 {
            for c in 0..8 {
                let n = s.cell(r, c).dot(&s.cell(r, c));
                if n > best.2 {
                    best = (r, c, n);
                }
            }
        }
        assert_eq!((best.0, best.1), (2, 3));
    }

    #[test]
    fn image_encoding_is_deterministic_and_size_checked() {
        let enc = ToyImageEncoder::new(&cfg(), 64);
        let img = image_from(|c, y, x| ((c * 31 + y * 7 + x) % 13) as f64 / 13.0, 64);
        let (a, sa) = enc.encode(&img).unwrap();
        let (b, sb) = enc.encode(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(enc.encode(&image_from(|_, _, _| 0.0, 32)).is_err());
    }

    #[test]
    fn global_vjp_matches_finite_differences() {
        let c = ToyConfig { grid: 3, ..cfg() };
        let enc = ToyImageEncoder::new(&c, 7);
        let img = image_from(|ch, y, x| ((ch + 2 * y + 3 * x) as f64 * 0.1).sin(), 7);
        let grad = Array1::from_shape_fn(enc.embed_dim(), |k| (k as f64 * 0.7).cos());
        let vjp = enc.global_vjp(&img, &grad).unwrap();
        let h = 1e-6;
        for &(ch, y, x) in &[(0, 0, 0), (1, 3, 4), (2, 6, 6), (0, 2, 5)] {
            let mut p = img.pixels().clone();
            p[[ch, y, x]] += h;
            let up = enc
                .encode_global(&ImageTensor::new(p.clone()).unwrap())
                .unwrap()
                .0
                .dot(&grad);
            p[[ch, y, x]] -= 2.0 * h;
            let dn = enc
                .encode_global(&ImageTensor::new(p).unwrap())
                .unwrap()
                .0
                .dot(&grad);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - vjp[[ch, y, x]]).abs() < 1e-8,
                "{fd} vs {}",
                vjp[[ch, y, x]]
            );
        }
    }

    fn tone(enc: &ToyAudioEncoder, k: usize, amp: f64, len: usize) -> AudioSegment {
        let f = enc.bin_frequency(k);
        let sr = enc.sample_rate as f64;
        let x = (0..len)
            .map(|n| amp * (2.0 * PI * f * n as f64 / sr).sin())
            .collect();
        AudioSegment::new(x, enc.sample_rate).unwrap()
    }

    #[test]
    fn silent_audio_gives_zero_features() {
        let enc = ToyAudioEncoder::new(&cfg(), 16_000).unwrap();
        let seq = enc
            .encode(&AudioSegment::new(vec![0.0; 160_000], 16_000).unwrap())
            .unwrap();
        assert!(seq.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ten_seconds_with_half_second_hop_has_twenty_steps() {
        let enc = ToyAudioEncoder::new(&cfg(), 16_000).unwrap();
        let seq = enc
            .encode(&AudioSegment::new(vec![0.1; 160_000], 16_000).unwrap())
            .unwrap();
        assert_eq!(seq.len(), 20);
        assert_eq!(seq.dim(), 16);
    }

    #[test]
    fn pure_tone_gives_projection_column() {
        let enc = ToyAudioEncoder::new(&cfg(), 16_000).unwrap();
        let k = 7;
        let seq = enc.encode(&tone(&enc, k, 1.0, 160_000)).unwrap();
        // Oracle: each sub-window holds exactly k cycles, so the frame mean
        // spectrum is e_k and the features are column k of the projection.
        let col = enc.projection().column(k).to_owned();
        for row in seq.features().rows() {
            let err = (&row - &col).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(err < 1e-9, "max err {err}");
        }
    }

    #[test]
    fn token_encoder_matches_closed_form() {
        let c = cfg();
        let enc = ToyTokenEncoder::new(&c);
        let ids = [1u32, 2, 3, 4, 2, 5];
        let p: Array1<f64> = ids
            .iter()
            .map(|&i| enc.vocab_row(i))
            .fold(Array1::zeros(16), |a, r| a + r);
        let with_zero = TokenSequence {
            tokens: ids
                .iter()
                .map(|&i| Token::Id(i))
                .chain(std::iter::once(Token::Continuous(Array1::zeros(16))))
                .collect(),
        };
        let e0 = enc.encode(&with_zero).unwrap().0;
        assert!((&e0 - &p).iter().all(|d| d.abs() < 1e-12));
        let u = Array1::from_shape_fn(16, |k| (k as f64 - 7.5) * 0.1);
        let mut seq = with_zero.clone();
        seq.tokens[6] = Token::Continuous(u.clone());
        let e = enc.encode(&seq).unwrap().0;
        let expected = &p + &enc.token_map().dot(&u);
        assert!((&e - &expected).iter().all(|d| d.abs() < 1e-12));
        let a = enc
            .encode(&TokenSequence {
                tokens: vec![Token::Id(1), Token::Id(2)],
            })
            .unwrap();
        let b = enc
            .encode(&TokenSequence {
                tokens: vec![Token::Id(1), Token::Id(3)],
            })
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn token_encoder_rejects_oversized_sequence() {
        let enc = ToyTokenEncoder::new(&cfg());
        let seq = TokenSequence {
            tokens: vec![Token::Id(1); 78],
        };
        assert!(enc.encode(&seq).is_err());
    }

    fn random_features(c: usize, g: usize, seed: u64) -> SpatialVisualFeatures {
        SpatialVisualFeatures::new(
            seeded_matrix(c, g * g, seed, 99, 1.0)
                .into_shape_with_order((c, g, g))
                .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn grounder_orthogonal_condition_gives_zero_logits() {
        let g = ToyGrounder::new(&cfg());
        let mut f = Array3::<f64>::zeros((4, 2, 2));
        f.slice_mut(s![0..2, .., ..]).fill(1.0);
        let v = SpatialVisualFeatures::new(f).unwrap();
        let cond = ndarray::array![0.0, 0.0, 1.0, -1.0];
        let logits = g.ground(&v, &cond).unwrap();
        assert!(logits.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn grounder_self_similarity_peaks_at_cell() {
        let g = ToyGrounder::new(&cfg());
        // Unit-norm cells: by Cauchy-Schwarz the matching cell is the unique argmax.
        let mut f = random_features(16, 4, 3).features().clone();
        for r in 0..4 {
            for c in 0..4 {
                let mut cell = f.slice_mut(s![.., r, c]);
                let n = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
                cell.mapv_inplace(|x| x / n);
            }
        }
        let v = SpatialVisualFeatures::new(f).unwrap();
        let logits = g.ground(&v, &v.cell(1, 1)).unwrap();
        let arg = logits
            .values()
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(arg, (1, 1));
    }

    #[test]
    fn grounder_matches_dot_product_oracle() {
        let gr = ToyGrounder::new(&cfg());
        let v = random_features(16, 8, 11);
        let cond = seeded_matrix(16, 1, 12, 1, 1.0).column(0).to_owned();
        let logits = gr.ground(&v, &cond).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let mut dot = 0.0;
                for k in 0..16 {
                    dot += cond[k] * v.features()[[k, r, c]];
                }
                assert!((logits.values()[[r, c]] - gr.scale() * dot).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grounder_dimension_mismatch_errors() {
        let gr = ToyGrounder::new(&cfg());
        let v = random_features(16, 8, 1);
        assert!(gr.ground(&v, &Array1::zeros(15)).is_err());
    }

    #[test]
    fn toy_backends_are_seed_reproducible() {
        let a = ToyImageEncoder::new(&cfg(), 64);
        let b = ToyImageEncoder::new(&cfg(), 64);
        assert_eq!(a.parameter_digest(), b.parameter_digest());
        let other = ToyImageEncoder::new(&ToyConfig { seed: 1, ..cfg() }, 64);
        assert_ne!(a.parameter_digest(), other.parameter_digest());
    }
}
