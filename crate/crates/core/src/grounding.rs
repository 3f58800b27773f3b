//! Maskers over grounder logits.
//!
//! * Image masker: learnable affine `w·m + b` on upsampled logits, binary
//!   concrete relaxation with a straight-through hard forward.
//! * Feature masker: min-max normalization then a soft threshold, at feature
//!   resolution.
//! * Inference: `σ(m + b/w)` (or the training form `σ(w·m + b)`), thresholded.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::resample::BilinearPlan;

/// Raw (pre-sigmoid) grounder output.
#[derive(Debug, Clone, PartialEq)]
pub struct GrounderLogits(Array2<f64>);

impl GrounderLogits {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty logit map".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite grounder logit".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.0.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskerParams {
    /// Image-masker scale (trainable).
    pub w: f64,
    /// Image-masker bias (trainable).
    pub b: f64,
    pub gumbel_temp: f64,
    pub soft_theta: f64,
    pub soft_temp: f64,
}

impl Default for MaskerParams {
    fn default() -> Self {
        Self {
            w: 1.0,
            b: 0.0,
            gumbel_temp: 0.7,
            soft_theta: 0.5,
            soft_temp: 0.1,
        }
    }
}

impl MaskerParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("w", self.w),
            ("b", self.b),
            ("gumbel_temp", self.gumbel_temp),
            ("soft_theta", self.soft_theta),
            ("soft_temp", self.soft_temp),
        ];
        for (k, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(format!("masker.{k}"), "must be finite"));
            }
        }
        if self.gumbel_temp <= 0.0 {
            return Err(Error::config("masker.gumbel_temp", "must be > 0"));
        }
        if self.soft_temp <= 0.0 {
            return Err(Error::config("masker.soft_temp", "must be > 0"));
        }
        Ok(())
    }
}

/// Per-pixel pair of independent Gumbel(0, 1) draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelPair {
    pub g1: Array2<f64>,
    pub g2: Array2<f64>,
}

fn gumbel(rng: &mut impl Rng) -> f64 {
    // Uniform on the open interval (0, 1).
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -(-u.ln()).ln()
}

impl GumbelPair {
    pub fn sample(shape: (usize, usize), rng: &mut impl Rng) -> Self {
        let g1 = Array2::from_shape_simple_fn(shape, || gumbel(rng));
        let g2 = Array2::from_shape_simple_fn(shape, || gumbel(rng));
        Self { g1, g2 }
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            g1: Array2::zeros(shape),
            g2: Array2::zeros(shape),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.g1.dim()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ImageMaskMode<'a> {
    Eval,
    Train(&'a GumbelPair),
}

/// What the image masker emits in the forward pass. The backward pass always
/// differentiates the relaxed value `y_soft`.
#[derive(Debug, Clone, Copy, Default)]
pub enum MaskForward<'a> {
    /// Hard `1[y_soft > 0.5]`.
    #[default]
    StraightThrough,
    /// The relaxed value itself. Used to check gradients numerically.
    Soft,
    /// `hard_ref + y_soft - soft_ref`: the straight-through estimator written
    /// as a function whose ordinary derivative is the estimator's gradient.
    /// Equal to the hard mask when evaluated at the reference point.
    Anchored {
        hard: &'a Array2<f64>,
        soft: &'a Array2<f64>,
    },
}

/// Pixel-resolution mask with its relaxed surrogate.
#[derive(Debug, Clone)]
pub struct ImageMask {
    value: Array2<f64>,
    hard: Array2<f64>,
    soft: Array2<f64>,
    upsampled: Array2<f64>,
    temp: f64,
    plan: BilinearPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrads {
    pub w: f64,
    pub b: f64,
    pub logits: Array2<f64>,
}

impl ImageMask {
    /// Forward values (binary under the straight-through forward).
    pub fn values(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn hard(&self) -> &Array2<f64> {
        &self.hard
    }

    pub fn soft(&self) -> &Array2<f64> {
        &self.soft
    }

    pub fn area(&self) -> f64 {
        self.value.mean().expect("nonempty mask")
    }

    pub fn size(&self) -> (usize, usize) {
        self.value.dim()
    }

    /// Pull a gradient on the forward values back through `y_soft`.
    pub fn backward(&self, grad: &Array2<f64>, w: f64) -> MaskGrads {
        assert_eq!(grad.dim(), self.value.dim(), "gradient size mismatch");
        let mut dm = Array2::<f64>::zeros(self.value.raw_dim());
        let (mut dw, mut db) = (0.0, 0.0);
        ndarray::Zip::from(&mut dm)
            .and(grad)
            .and(&self.soft)
            .and(&self.upsampled)
            .for_each(|dm, &g, &y, &m| {
                let dlin = g * y * (1.0 - y) / self.temp;
                dw += dlin * m;
                db += dlin;
                *dm = dlin * w;
            });
        MaskGrads {
            w: dw,
            b: db,
            logits: self.plan.adjoint(dm.view()),
        }
    }
}

pub fn image_mask(
    logits: &GrounderLogits,
    params: &MaskerParams,
    out_size: (usize, usize),
    mode: ImageMaskMode<'_>,
    forward: MaskForward<'_>,
) -> Result<ImageMask> {
    let plan = BilinearPlan::new(logits.resolution(), out_size);
    let upsampled = plan.apply(logits.values().view());
    let (soft, temp) = match mode {
        ImageMaskMode::Eval => (upsampled.mapv(|m| sigmoid(params.w * m + params.b)), 1.0),
        ImageMaskMode::Train(noise) => {
            if noise.shape() != out_size {
                return Err(Error::Shape(format!(
                    "noise field {:?} does not match mask size {out_size:?}",
                    noise.shape()
                )));
            }
            let t = params.gumbel_temp;
            let mut y = Array2::<f64>::zeros(out_size);
            ndarray::Zip::from(&mut y)
                .and(&upsampled)
                .and(&noise.g1)
                .and(&noise.g2)
                .for_each(|y, &m, &g1, &g2| *y = sigmoid((params.w * m + params.b + g1 - g2) / t));
            (y, t)
        }
    };
    let hard = soft.mapv(|y| if y > 0.5 { 1.0 } else { 0.0 });
    let value = match forward {
        MaskForward::StraightThrough => hard.clone(),
        MaskForward::Soft => soft.clone(),
        MaskForward::Anchored { hard: h, soft: s } => {
            if h.dim() != out_size || s.dim() != out_size {
                return Err(Error::Shape("anchor masks do not match mask size".into()));
            }
            h + &soft - s
        }
    };
    Ok(ImageMask {
        value,
        hard,
        soft,
        upsampled,
        temp,
        plan,
    })
}

/// Soft feature-resolution mask with values strictly inside `(0, 1)`.
#[derive(Debug, Clone)]
pub struct FeatureMask {
    values: Array2<f64>,
    trace: Option<FeatureMaskTrace>,
}

#[derive(Debug, Clone)]
struct FeatureMaskTrace {
    normalized: Array2<f64>,
    range: f64,
    argmin: (usize, usize),
    argmax: (usize, usize),
    temp: f64,
    plan: BilinearPlan,
}

pub const DEGENERATE_RANGE: f64 = 1e-8;

impl FeatureMask {
    /// Wrap externally computed soft weights. Entries must lie strictly in
    /// `(0, 1)`; in particular hard binary masks are rejected, since an
    /// all-but-empty binary mask would make the pooled feature arbitrary.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty feature mask".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidInput(format!(
                "feature mask entries must lie in (0, 1), found {v}"
            )));
        }
        Ok(Self {
            values,
            trace: None,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Gradient with respect to the grounder logits.
    pub fn backward(&self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        let trace = self.trace.as_ref().ok_or_else(|| {
            Error::InvalidInput("feature mask was not produced by feature_mask".into())
        })?;
        if grad.dim() != self.values.dim() {
            return Err(Error::Shape("feature mask gradient size mismatch".into()));
        }
        if trace.range < DEGENERATE_RANGE {
            return Ok(Array2::zeros(trace.plan.src()));
        }
        // dL/dn for the normalized map, then through (m - min) / (max - min).
        let dn = ndarray::Zip::from(grad)
            .and(&self.values)
            .map_collect(|&g, &v| g * v * (1.0 - v) / trace.temp);
        let r = trace.range;
        let mut dm = &dn / r;
        let to_min: f64 = ndarray::Zip::from(&dn)
            .and(&trace.normalized)
            .fold(0.0, |acc, &d, &n| acc + d * (n - 1.0));
        let to_max: f64 = ndarray::Zip::from(&dn)
            .and(&trace.normalized)
            .fold(0.0, |acc, &d, &n| acc - d * n);
        dm[trace.argmin] += to_min / r;
        dm[trace.argmax] += to_max / r;
        Ok(trace.plan.adjoint(dm.view()))
    }
}

pub fn feature_mask(
    logits: &GrounderLogits,
    params: &MaskerParams,
    feature_grid: (usize, usize),
) -> Result<FeatureMask> {
    let plan = BilinearPlan::new(logits.resolution(), feature_grid);
    let m = plan.apply(logits.values().view());
    let mut argmin = (0, 0);
    let mut argmax = (0, 0);
    for (idx, &v) in m.indexed_iter() {
        if v < m[argmin] {
            argmin = idx;
        }
        if v > m[argmax] {
            argmax = idx;
        }
    }
    let range = m[argmax] - m[argmin];
    let (normalized, values) = if range < DEGENERATE_RANGE {
        (
            Array2::zeros(feature_grid),
            Array2::from_elem(feature_grid, 0.5),
        )
    } else {
        let n = m.mapv(|v| (v - m[argmin]) / range);
        let vals = n.mapv(|x| sigmoid((x - params.soft_theta) / params.soft_temp));
        (n, vals)
    };
    Ok(FeatureMask {
        values,
        trace: Some(FeatureMaskTrace {
            normalized,
            range,
            argmin,
            argmax,
            temp: params.soft_temp,
            plan,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceRule {
    /// `σ(m + b/w)`
    #[default]
    BiasOverScale,
    /// `σ(w·m + b)`
    TrainForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub confidence: Array2<f64>,
    pub binary: Array2<bool>,
}

pub fn inference_mask(
    logits: &GrounderLogits,
    params: &MaskerParams,
    threshold: f64,
    rule: InferenceRule,
    out_size: (usize, usize),
) -> Result<LocalizationMap> {
    if params.w <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "inference requires a positive masker scale, got w = {}",
            params.w
        )));
    }
    let m = BilinearPlan::new(logits.resolution(), out_size).apply(logits.values().view());
    let confidence = match rule {
        InferenceRule::BiasOverScale => m.mapv(|v| sigmoid(v + params.b / params.w)),
        InferenceRule::TrainForm => m.mapv(|v| sigmoid(params.w * v + params.b)),
    };
    let binary = confidence.mapv(|c| c >= threshold);
    Ok(LocalizationMap { confidence, binary })
}

const TENSOR_MAGIC: [u8; 4] = *b"AVCM";
const DTYPE_F32: u32 = 1;

/// Serialize a map as: magic `AVCM`, dtype code (1 = f32), height, width
/// (all u32 little-endian), then row-major little-endian f32 values.
pub fn write_map_tensor(mut out: impl Write, map: &Array2<f64>) -> std::io::Result<()> {
    let (h, w) = map.dim();
    out.write_all(&TENSOR_MAGIC)?;
    out.write_all(&DTYPE_F32.to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for v in map.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_map_tensor(mut input: impl Read) -> Result<Array2<f64>> {
    let bad = |m: &str| Error::InvalidInput(format!("map tensor: {m}"));
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| bad("truncated header"))?;
    if header[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != DTYPE_F32 {
        return Err(bad("unsupported dtype code"));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let mut body = vec![0u8; h * w * 4];
    input
        .read_exact(&mut body)
        .map_err(|_| bad("truncated body"))?;
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((h, w), vals).map_err(|e| bad(&e.to_string()))
}

pub fn save_map_tensor(path: impl AsRef<Path>, map: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_map_tensor(&mut w, map).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_map_tensor(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_map_tensor(std::io::BufReader::new(f))
}

/// 8-bit grayscale rendering, `round(255·v)` with `v` clamped to `[0, 1]`.
pub fn map_to_gray(map: &Array2<f64>) -> image::GrayImage {
    let (h, w) = map.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn binary_to_gray(map: &Array2<bool>) -> image::GrayImage {
    let (h, w) = map.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if map[[y as usize, x as usize]] {
            255
        } else {
            0
        }])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn logits(v: Array2<f64>) -> GrounderLogits {
        GrounderLogits::new(v).unwrap()
    }

    fn masker(w: f64, b: f64) -> MaskerParams {
        MaskerParams {
            w,
            b,
            ..MaskerParams::default()
        }
    }

    #[test]
    fn eval_mask_positive_logits_all_ones() {
        let l = logits(Array2::from_elem((4, 4), 3.0));
        let m = image_mask(
            &l,
            &masker(1.0, 0.0),
            (8, 8),
            ImageMaskMode::Eval,
            MaskForward::default(),
        )
        .unwrap();
        assert!(m.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn half_is_off_under_strict_threshold() {
        let l = logits(Array2::zeros((4, 4)));
        let noise = GumbelPair::zeros((8, 8));
        let m = image_mask(
            &l,
            &masker(1.0, 0.0),
            (8, 8),
            ImageMaskMode::Train(&noise),
            MaskForward::default(),
        )
        .unwrap();
        assert!(m.soft().iter().all(|v| *v == 0.5));
        assert!(m.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_sign_rule() {
        let p = masker(2.0, -1.0);
        let at = |m: f64| {
            let l = logits(Array2::from_elem((2, 2), m));
            image_mask(&l, &p, (2, 2), ImageMaskMode::Eval, MaskForward::default()).unwrap()
        };
        let half = at(0.5);
        assert_eq!(half.soft()[[0, 0]], 0.5);
        assert_eq!(half.values()[[0, 0]], 0.0);
        let above = at(0.6);
        assert!((above.soft()[[0, 0]] - 0.549_833_997_312_478).abs() < 1e-12);
        assert_eq!(above.values()[[0, 0]], 1.0);
    }

    #[test]
    fn forward_is_binary_and_backward_uses_soft_gradient() {
        let l = logits(array![[0.3, -0.8], [1.2, -0.1]]);
        let p = masker(1.3, 0.2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        use rand::SeedableRng;
        let noise = GumbelPair::sample((5, 5), &mut rng);
        let st = image_mask(
            &l,
            &p,
            (5, 5),
            ImageMaskMode::Train(&noise),
            MaskForward::default(),
        )
        .unwrap();
        assert!(st.values().iter().all(|v| *v == 0.0 || *v == 1.0));
        let probe = Array2::from_shape_fn((5, 5), |(r, c)| (r as f64 - c as f64 * 0.5).sin());
        let g = st.backward(&probe, p.w);
        // Explicitly soft computation differentiated numerically.
        let soft_obj = |p: &MaskerParams, l: &GrounderLogits| {
            let m = image_mask(
                l,
                p,
                (5, 5),
                ImageMaskMode::Train(&noise),
                MaskForward::Soft,
            )
            .unwrap();
            (m.values() * &probe).sum()
        };
        let h = 1e-6;
        let fd_w =
            (soft_obj(&masker(p.w + h, p.b), &l) - soft_obj(&masker(p.w - h, p.b), &l)) / (2.0 * h);
        let fd_b =
            (soft_obj(&masker(p.w, p.b + h), &l) - soft_obj(&masker(p.w, p.b - h), &l)) / (2.0 * h);
        assert!((fd_w - g.w).abs() <= 1e-4 * fd_w.abs().max(1e-3));
        assert!((fd_b - g.b).abs() <= 1e-4 * fd_b.abs().max(1e-3));
        for (r, c) in [(0, 0), (1, 0), (1, 1)] {
            let mut up = l.values().clone();
            up[[r, c]] += h;
            let mut dn = l.values().clone();
            dn[[r, c]] -= h;
            let fd = (soft_obj(&p, &logits(up)) - soft_obj(&p, &logits(dn))) / (2.0 * h);
            assert!((fd - g.logits[[r, c]]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn small_temperature_converges_to_eval_mask() {
        let l = logits(array![[0.9, -0.4], [0.05, -1.5]]);
        let noise = GumbelPair::zeros((6, 6));
        let eval = image_mask(
            &l,
            &masker(1.0, 0.1),
            (6, 6),
            ImageMaskMode::Eval,
            MaskForward::default(),
        )
        .unwrap();
        let p = MaskerParams {
            gumbel_temp: 1e-3,
            ..masker(1.0, 0.1)
        };
        let train = image_mask(
            &l,
            &p,
            (6, 6),
            ImageMaskMode::Train(&noise),
            MaskForward::Soft,
        )
        .unwrap();
        for ((t, e), s) in train.values().iter().zip(eval.values()).zip(eval.soft()) {
            if (s - 0.5).abs() > 0.05 {
                assert!((t - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_logits_give_uniform_half() {
        let fm = feature_mask(
            &logits(Array2::from_elem((3, 3), 2.5)),
            &MaskerParams::default(),
            (3, 3),
        )
        .unwrap();
        assert!(fm.values().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn soft_threshold_example() {
        let fm = feature_mask(
            &logits(array![[0.0, 1.0], [2.0, 3.0]]),
            &MaskerParams::default(),
            (2, 2),
        )
        .unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = [s(-5.0), s(-5.0 / 3.0), s(5.0 / 3.0), s(5.0)];
        for (v, e) in fm.values().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        let rounded = [0.0067, 0.1589, 0.8411, 0.9933];
        for (v, r) in fm.values().iter().zip(rounded) {
            assert!((v - r).abs() < 5e-5);
        }
    }

    #[test]
    fn feature_mask_backward_matches_central_differences() {
        let base = array![[0.3, -1.1, 0.7], [2.2, 0.1, -0.4], [1.0, 0.5, -2.0]];
        let p = MaskerParams::default();
        let probe = Array2::from_shape_fn((3, 3), |(r, c)| ((r * 3 + c) as f64 * 0.77).cos());
        let f = |l: &Array2<f64>| {
            (feature_mask(&logits(l.clone()), &p, (3, 3))
                .unwrap()
                .values()
                * &probe)
                .sum()
        };
        let g = feature_mask(&logits(base.clone()), &p, (3, 3))
            .unwrap()
            .backward(&probe)
            .unwrap();
        let h = 1e-6;
        for ((r, c), an) in g.indexed_iter() {
            let mut up = base.clone();
            up[[r, c]] += h;
            let mut dn = base.clone();
            dn[[r, c]] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - an).abs() < 1e-7, "({r},{c}) fd {fd} an {an}");
        }
    }

    #[test]
    fn feature_mask_resamples_to_grid() {
        let fm = feature_mask(
            &logits(array![[0.0, 1.0], [2.0, 3.0]]),
            &MaskerParams::default(),
            (4, 4),
        )
        .unwrap();
        assert_eq!(fm.grid(), (4, 4));
    }

    #[test]
    fn binary_masks_are_rejected_as_feature_masks() {
        assert!(FeatureMask::from_values(array![[1.0, 0.0], [0.0, 0.0]]).is_err());
        assert!(FeatureMask::from_values(array![[0.2, 0.9], [0.5, 0.01]]).is_ok());
    }

    #[test]
    fn inference_boundary_is_inclusive() {
        let out = inference_mask(
            &logits(Array2::zeros((2, 2))),
            &masker(1.0, 0.0),
            0.5,
            InferenceRule::BiasOverScale,
            (4, 4),
        )
        .unwrap();
        assert!(out.confidence.iter().all(|c| *c == 0.5));
        assert!(out.binary.iter().all(|b| *b));
    }

    #[test]
    fn inference_example_value() {
        let out = inference_mask(
            &logits(Array2::from_elem((1, 1), 0.2)),
            &masker(2.0, -1.0),
            0.5,
            InferenceRule::BiasOverScale,
            (1, 1),
        )
        .unwrap();
        assert!((out.confidence[[0, 0]] - 0.425_557_483_188_341).abs() < 1e-12);
        assert!(!out.binary[[0, 0]]);
    }

    #[test]
    fn inference_rejects_nonpositive_scale() {
        let l = logits(Array2::zeros((2, 2)));
        assert!(inference_mask(
            &l,
            &masker(0.0, 0.0),
            0.5,
            InferenceRule::BiasOverScale,
            (2, 2)
        )
        .is_err());
        assert!(inference_mask(
            &l,
            &masker(-1.0, 0.0),
            0.5,
            InferenceRule::BiasOverScale,
            (2, 2)
        )
        .is_err());
    }

    #[test]
    fn map_tensor_round_trip_and_header() {
        let map = array![[0.0, 0.25], [0.5, 1.0], [0.125, 0.75]];
        let mut buf = Vec::new();
        write_map_tensor(&mut buf, &map).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(&buf[..4], b"AVCM");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(read_map_tensor(&buf[..]).unwrap(), map);
        assert!(read_map_tensor(&buf[..10]).is_err());
    }

    #[test]
    fn gray_rendering_rounds() {
        let img = map_to_gray(&array![[0.0, 0.5, 1.0]]);
        assert_eq!(img.as_raw(), &vec![0u8, 128, 255]);
    }

    proptest! {
        #[test]
        fn feature_mask_range_and_affine_invariance(
            vals in proptest::collection::vec(-5.0f64..5.0, 9),
            a in 0.1f64..10.0,
            c in -3.0f64..3.0,
        ) {
            let base = Array2::from_shape_vec((3, 3), vals).unwrap();
            let p = MaskerParams::default();
            let m1 = feature_mask(&logits(base.clone()), &p, (3, 3)).unwrap();
            let m2 = feature_mask(&logits(base.mapv(|v| a * v + c)), &p, (3, 3)).unwrap();
            for (x, y) in m1.values().iter().zip(m2.values()) {
                prop_assert!(*x > 0.0 && *x < 1.0);
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn training_and_inference_share_decision_boundary(
            vals in proptest::collection::vec(-4.0f64..4.0, 4),
            w in 0.05f64..5.0,
            b in -3.0f64..3.0,
        ) {
            let l = logits(Array2::from_shape_vec((2, 2), vals).unwrap());
            let p = masker(w, b);
            let eval = image_mask(&l, &p, (5, 5), ImageMaskMode::Eval, MaskForward::default()).unwrap();
            let inf = inference_mask(&l, &p, 0.5, InferenceRule::BiasOverScale, (5, 5)).unwrap();
            for ((s, e), i) in eval.soft().iter().zip(eval.values()).zip(&inf.binary) {
                if (s - 0.5).abs() > 1e-9 {
                    prop_assert_eq!(*e == 1.0, *i);
                }
            }
        }
    }
}
