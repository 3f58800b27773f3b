//! Batch similarity matrices, symmetric InfoNCE, masked pooling and the area
//! prior.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_embedder::AudioDrivenEmbedding;
use crate::datamodel::ImageTensor;
use crate::encoders::{Grounder, ImageEncoder, SpatialVisualFeatures};
use crate::error::{Error, Result};
use crate::grounding::{feature_mask, FeatureMask, MaskerParams};
use crate::ops::{l2_normalize, log_sum_exp};

/// `B×B` cosine similarities, rows indexed by visual sample, columns by audio.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite similarity".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_acl_i: f64,
    pub lambda_acl_f: f64,
    pub lambda_reg: f64,
    pub p_pos: f64,
    pub p_neg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_acl_i: 1.0,
            lambda_acl_f: 1.0,
            lambda_reg: 1.0,
            p_pos: 0.4,
            p_neg: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(
                "loss.tau",
                format!("must be > 0, got {}", self.tau),
            ));
        }
        for (k, v) in [
            ("lambda_acl_i", self.lambda_acl_i),
            ("lambda_acl_f", self.lambda_acl_f),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("loss.{k}"),
                    format!("must be >= 0, got {v}"),
                ));
            }
        }
        for (k, v) in [("p_pos", self.p_pos), ("p_neg", self.p_neg)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    format!("loss.{k}"),
                    format!("must lie in [0, 1], got {v}"),
                ));
            }
        }
        Ok(())
    }
}

fn check_square(s: &SimilarityMatrix, tau: f64) -> Result<usize> {
    let (r, c) = s.0.dim();
    if r != c {
        return Err(Error::Shape(format!(
            "similarity matrix must be square, got {r}x{c}"
        )));
    }
    if r == 0 {
        return Err(Error::Shape("empty similarity matrix".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    Ok(r)
}

pub fn info_nce_symmetric(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    info_nce_symmetric_grad(s, tau).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the similarity entries.
pub fn info_nce_symmetric_grad(s: &SimilarityMatrix, tau: f64) -> Result<(f64, Array2<f64>)> {
    let b = check_square(s, tau)?;
    let z = &s.0 / tau;
    let row_lse: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|r| log_sum_exp(r.iter().copied()))
        .collect();
    let col_lse: Vec<f64> = z
        .columns()
        .into_iter()
        .map(|c| log_sum_exp(c.iter().copied()))
        .collect();
    let mut loss = 0.0;
    for i in 0..b {
        loss += (row_lse[i] - z[[i, i]]) + (col_lse[i] - z[[i, i]]);
    }
    let scale = 1.0 / (2.0 * b as f64);
    loss *= scale;

    let grad = Array2::from_shape_fn((b, b), |(i, j)| {
        let delta = if i == j { 1.0 } else { 0.0 };
        let p_row = (z[[i, j]] - row_lse[i]).exp();
        let p_col = (z[[i, j]] - col_lse[j]).exp();
        scale / tau * ((p_row - delta) + (p_col - delta))
    });
    Ok((loss.max(0.0), grad))
}

/// `X ⊙ M`, the mask broadcast over channels.
pub fn masked_image(image: &ImageTensor, mask: &Array2<f64>) -> Result<ImageTensor> {
    if image.size() != mask.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            mask.dim(),
            image.size()
        )));
    }
    ImageTensor::new(image.pixels() * &mask.view().insert_axis(Axis(0)))
}

/// Masked re-encoding of each positive pair, `v^I_i`, unit-normalized.
pub fn masked_global_embeddings(
    images: &[ImageTensor],
    masks: &[Array2<f64>],
    encoder: &dyn ImageEncoder,
) -> Result<Vec<(Array1<f64>, f64)>> {
    if images.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} images but {} positive masks",
            images.len(),
            masks.len()
        )));
    }
    images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(x, m)| {
            let v = encoder.encode_global(&masked_image(x, m)?)?;
            Ok(l2_normalize(&v.0))
        })
        .collect()
}

fn check_audio(audio: &[AudioDrivenEmbedding], b: usize) -> Result<()> {
    if audio.len() != b {
        return Err(Error::Shape(format!(
            "{b} visual rows but {} audio embeddings",
            audio.len()
        )));
    }
    Ok(())
}

fn dot_matrix(rows: &[Array1<f64>], audio: &[AudioDrivenEmbedding]) -> Result<SimilarityMatrix> {
    let b = rows.len();
    SimilarityMatrix::new(Array2::from_shape_fn((b, b), |(i, j)| {
        rows[i].dot(&audio[j].0)
    }))
}

/// `S^I`. One masked re-encoding per sample, using the positive-pair mask.
pub fn image_level_similarity(
    images: &[ImageTensor],
    positive_masks: &[Array2<f64>],
    audio: &[AudioDrivenEmbedding],
    encoder: &dyn ImageEncoder,
) -> Result<SimilarityMatrix> {
    check_audio(audio, images.len())?;
    let v: Vec<_> = masked_global_embeddings(images, positive_masks, encoder)?
        .into_iter()
        .map(|(u, _)| u)
        .collect();
    dot_matrix(&v, audio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundedFeatureEmbedding(pub Array1<f64>);

/// `Σ M·vD / Σ M` over the feature grid.
pub fn masked_spatial_pool(
    vd: &SpatialVisualFeatures,
    mask: &FeatureMask,
) -> Result<GroundedFeatureEmbedding> {
    pool_weights(vd, mask.values().view()).map(GroundedFeatureEmbedding)
}

pub(crate) fn pool_weights(vd: &SpatialVisualFeatures, m: ArrayView2<f64>) -> Result<Array1<f64>> {
    if m.dim() != vd.grid() {
        return Err(Error::Shape(format!(
            "feature mask {:?} does not match feature grid {:?}",
            m.dim(),
            vd.grid()
        )));
    }
    let total = m.sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidInput("feature mask has no mass".into()));
    }
    let f = vd.features();
    let mut acc = Array1::<f64>::zeros(vd.channels());
    for ((r, s), &w) in m.indexed_iter() {
        acc.scaled_add(w, &f.slice(ndarray::s![.., r, s]));
    }
    Ok(acc / total)
}

/// Gradient of `<grad, pool(vD, M)>` with respect to the mask entries.
pub(crate) fn pool_weights_backward(
    vd: &SpatialVisualFeatures,
    m: ArrayView2<f64>,
    pooled: &Array1<f64>,
    grad: &Array1<f64>,
) -> Array2<f64> {
    let total = m.sum();
    let base = grad.dot(pooled);
    let f = vd.features();
    Array2::from_shape_fn(m.dim(), |(r, s)| {
        (grad.dot(&f.slice(ndarray::s![.., r, s])) - base) / total
    })
}

/// `S^F` over all `B²` (image, audio) conditionings. Rows are computed
/// concurrently and assembled in row-major order.
pub fn feature_level_similarity(
    spatial: &[SpatialVisualFeatures],
    audio: &[AudioDrivenEmbedding],
    grounder: &dyn Grounder,
    params: &MaskerParams,
) -> Result<SimilarityMatrix> {
    let b = spatial.len();
    check_audio(audio, b)?;
    let entries: Vec<f64> = (0..b * b)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / b, k % b);
            let logits = grounder.ground(&spatial[i], &audio[j].0)?;
            let fm = feature_mask(&logits, params, spatial[i].grid())?;
            let v = masked_spatial_pool(&spatial[i], &fm)?;
            Ok(l2_normalize(&v.0).0.dot(&audio[j].0))
        })
        .collect::<Result<_>>()?;
    SimilarityMatrix::new(Array2::from_shape_vec((b, b), entries).expect("b*b entries"))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Area prior over spatial mask means `M̄_ij` (diagonal = positive pairs).
/// Plain sums, no batch averaging.
pub fn area_regularizer(mean_areas: ArrayView2<f64>, cfg: &LossConfig) -> f64 {
    let mut pos = 0.0;
    let mut neg = 0.0;
    for ((i, j), &m) in mean_areas.indexed_iter() {
        if i == j {
            pos += (cfg.p_pos - m).abs();
        } else {
            neg += (cfg.p_neg - m).abs();
        }
    }
    pos + neg
}

/// Derivative of [`area_regularizer`] with respect to one mean, with
/// `sign(0) = 0`.
pub fn area_regularizer_grad_entry(mean: f64, positive: bool, cfg: &LossConfig) -> f64 {
    let prior = if positive { cfg.p_pos } else { cfg.p_neg };
    -sign(prior - mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub acl_i: f64,
    pub acl_f: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn compose(acl_i: f64, acl_f: f64, reg: f64, cfg: &LossConfig) -> Self {
        Self {
            loss: cfg.lambda_acl_i * acl_i + cfg.lambda_acl_f * acl_f + cfg.lambda_reg * reg,
            acl_i,
            acl_f,
            reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.acl_i.is_finite()
            && self.acl_f.is_finite()
            && self.reg.is_finite()
    }
}

pub fn total_loss(
    s_image: &SimilarityMatrix,
    s_feature: &SimilarityMatrix,
    mean_areas: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let acl_i = info_nce_symmetric(s_image, cfg.tau)?;
    let acl_f = info_nce_symmetric(s_feature, cfg.tau)?;
    if mean_areas.dim() != s_image.0.dim() {
        return Err(Error::Shape("area matrix does not match batch size".into()));
    }
    Ok(LossBreakdown::compose(
        acl_i,
        acl_f,
        area_regularizer(mean_areas, cfg),
        cfg,
    ))
}
