//! Batch forward and manual backward of the full training objective.
//!
//! Only the positive-pair image masks are kept for the masked re-encoding.
//! Negative-pair image masks only contribute their spatial mean to the area
//! prior, whose gradient is local to the pair, so they are consumed as soon
//! as they are produced.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::alignment::{
    area_regularizer, area_regularizer_grad_entry, info_nce_symmetric_grad,
    masked_global_embeddings, masked_image, pool_weights, pool_weights_backward, LossBreakdown,
    LossConfig, SimilarityMatrix,
};
use crate::audio_embedder::{
    embed_features, embed_features_backward, EmbeddingTrace, PlaceholderTemplate, ProjectionParams,
};
use crate::datamodel::{AudioSegment, ImageTensor};
use crate::encoders::{AudioFeatureSequence, Backends, SpatialVisualFeatures};
use crate::error::{Error, Result};
use crate::grounding::{
    feature_mask, image_mask, FeatureMask, GumbelPair, ImageMask, ImageMaskMode, MaskForward,
    MaskGrads, MaskerParams,
};
use crate::ops::{l2_normalize, l2_normalize_backward};
use crate::training::noise::gumbel_field;

/// A training pair with its frozen-encoder outputs computed once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: ImageTensor,
    pub spatial: SpatialVisualFeatures,
    pub audio: AudioFeatureSequence,
}

impl PreparedSample {
    pub fn encode(
        id: impl Into<String>,
        image: ImageTensor,
        audio: &AudioSegment,
        backends: &Backends,
    ) -> Result<Self> {
        if image.size() != backends.image.input_size() {
            return Err(Error::Shape(format!(
                "image {:?} does not match encoder input {:?}",
                image.size(),
                backends.image.input_size()
            )));
        }
        let (_, spatial) = backends.image.encode(&image)?;
        let audio = backends.audio.encode(audio)?;
        Ok(Self {
            id: id.into(),
            image,
            spatial,
            audio,
        })
    }
}

/// Every trainable quantity: the projection network and the image-masker
/// scale and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub projection: ProjectionParams,
    pub w: f64,
    pub b: f64,
}

impl Trainable {
    pub fn zeros_like(&self) -> Self {
        Self {
            projection: self.projection.zeros_like(),
            w: 0.0,
            b: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.projection.num_params() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.projection.to_flat();
        v.push(self.w);
        v.push(self.b);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.projection.num_params();
        assert_eq!(flat.len(), n + 2, "flat parameter length");
        self.projection.set_flat(&flat[..n]);
        self.w = flat[n];
        self.b = flat[n + 1];
    }

    pub fn is_finite(&self) -> bool {
        self.projection.is_finite() && self.w.is_finite() && self.b.is_finite()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum NoiseSource {
    /// Gumbel draws keyed on `(seed, epoch, step, i, j)`.
    Keyed {
        seed: u64,
        epoch: usize,
        step: usize,
    },
    Zero,
}

impl NoiseSource {
    fn field(&self, i: usize, j: usize, shape: (usize, usize)) -> GumbelPair {
        match *self {
            NoiseSource::Keyed { seed, epoch, step } => {
                gumbel_field(seed, epoch, step, i, j, shape)
            }
            NoiseSource::Zero => GumbelPair::zeros(shape),
        }
    }
}

/// Reference hard/soft masks for every pair, row-major over `(i, j)`.
#[derive(Debug, Clone)]
pub struct Anchors {
    hard: Vec<Array2<f64>>,
    soft: Vec<Array2<f64>>,
}

/// Which forward value the image masker emits.
#[derive(Debug, Clone, Copy, Default)]
pub enum Surrogate<'a> {
    #[default]
    StraightThrough,
    Soft,
    Anchored(&'a Anchors),
}

impl<'a> Surrogate<'a> {
    fn forward(&self, k: usize) -> MaskForward<'a> {
        match *self {
            Surrogate::StraightThrough => MaskForward::StraightThrough,
            Surrogate::Soft => MaskForward::Soft,
            Surrogate::Anchored(a) => MaskForward::Anchored {
                hard: &a.hard[k],
                soft: &a.soft[k],
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub breakdown: LossBreakdown,
    pub s_image: SimilarityMatrix,
    pub s_feature: SimilarityMatrix,
    /// `M̄_ij`, spatial mean of every image mask.
    pub mean_areas: Array2<f64>,
    pub grads: Option<Trainable>,
}

impl BatchOutput {
    pub fn mask_area_pos_mean(&self) -> f64 {
        self.mean_areas.diag().mean().expect("nonempty batch")
    }
}

/// Frozen context for evaluating the objective.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub backends: &'a Backends,
    pub template: &'a PlaceholderTemplate,
    pub loss: &'a LossConfig,
    /// Fixed masker settings; `w` and `b` are taken from [`Trainable`].
    pub masker: &'a MaskerParams,
}

struct PairForward {
    feature: FeatureMask,
    pooled: Array1<f64>,
    unit: Array1<f64>,
    norm: f64,
    area: f64,
    positive: Option<ImageMask>,
    reg_grads: Option<MaskGrads>,
}

struct Forward {
    embeds: Vec<EmbeddingTrace>,
    audio: Vec<Array1<f64>>,
    pairs: Vec<PairForward>,
    v_image: Vec<(Array1<f64>, f64)>,
}

impl Objective<'_> {
    fn masker_with(&self, params: &Trainable) -> MaskerParams {
        MaskerParams {
            w: params.w,
            b: params.b,
            ..*self.masker
        }
    }

    /// Hard and soft image masks for every pair at `params`, for use with
    /// [`Surrogate::Anchored`].
    pub fn anchors(
        &self,
        batch: &[&PreparedSample],
        params: &Trainable,
        noise: NoiseSource,
    ) -> Result<Anchors> {
        let masker = self.masker_with(params);
        let audio = self.embed_all(batch, params)?;
        let b = batch.len();
        let masks: Vec<(Array2<f64>, Array2<f64>)> = (0..b * b)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / b, k % b);
                let logits = self
                    .backends
                    .grounder
                    .ground(&batch[i].spatial, &audio[j].1)?;
                let size = batch[i].image.size();
                let noise = noise.field(i, j, size);
                let m = image_mask(
                    &logits,
                    &masker,
                    size,
                    ImageMaskMode::Train(&noise),
                    MaskForward::default(),
                )?;
                Ok((m.hard().clone(), m.soft().clone()))
            })
            .collect::<Result<_>>()?;
        let (hard, soft) = masks.into_iter().unzip();
        Ok(Anchors { hard, soft })
    }

    fn embed_all(
        &self,
        batch: &[&PreparedSample],
        params: &Trainable,
    ) -> Result<Vec<(EmbeddingTrace, Array1<f64>)>> {
        batch
            .par_iter()
            .map(|s| {
                let (a, trace) = embed_features(
                    &s.audio,
                    &params.projection,
                    self.backends.tokens.as_ref(),
                    self.template,
                )?;
                Ok((trace, a.0))
            })
            .collect()
    }

    fn forward(
        &self,
        batch: &[&PreparedSample],
        params: &Trainable,
        noise: NoiseSource,
        surrogate: Surrogate<'_>,
        with_grad: bool,
    ) -> Result<Forward> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let masker = self.masker_with(params);
        let (embeds, audio): (Vec<_>, Vec<_>) = self.embed_all(batch, params)?.into_iter().unzip();
        let lambda_reg = self.loss.lambda_reg;

        let pairs: Vec<PairForward> = (0..b * b)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / b, k % b);
                let vd = &batch[i].spatial;
                let logits = self.backends.grounder.ground(vd, &audio[j])?;

                let feature = feature_mask(&logits, &masker, vd.grid())?;
                let pooled = pool_weights(vd, feature.values().view())?;
                let (unit, norm) = l2_normalize(&pooled);

                let size = batch[i].image.size();
                let field = noise.field(i, j, size);
                let im = image_mask(
                    &logits,
                    &masker,
                    size,
                    ImageMaskMode::Train(&field),
                    surrogate.forward(k),
                )?;
                let area = im.area();
                let (positive, reg_grads) = if i == j {
                    (Some(im), None)
                } else {
                    let d = lambda_reg * area_regularizer_grad_entry(area, false, self.loss);
                    let g = (with_grad && d != 0.0).then(|| {
                        let px = (size.0 * size.1) as f64;
                        im.backward(&Array2::from_elem(size, d / px), masker.w)
                    });
                    (None, g)
                };
                Ok(PairForward {
                    feature,
                    pooled,
                    unit,
                    norm,
                    area,
                    positive,
                    reg_grads,
                })
            })
            .collect::<Result<_>>()?;

        let images: Vec<ImageTensor> = batch.iter().map(|s| s.image.clone()).collect();
        let pos_masks: Vec<Array2<f64>> = (0..b)
            .map(|i| {
                pairs[i * b + i]
                    .positive
                    .as_ref()
                    .expect("diagonal mask")
                    .values()
                    .clone()
            })
            .collect();
        let v_image = masked_global_embeddings(&images, &pos_masks, self.backends.image.as_ref())?;
        Ok(Forward {
            embeds,
            audio,
            pairs,
            v_image,
        })
    }

    pub fn evaluate(
        &self,
        batch: &[&PreparedSample],
        params: &Trainable,
        noise: NoiseSource,
        surrogate: Surrogate<'_>,
        with_grad: bool,
    ) -> Result<BatchOutput> {
        let b = batch.len();
        let fwd = self.forward(batch, params, noise, surrogate, with_grad)?;
        let s_image = SimilarityMatrix::new(Array2::from_shape_fn((b, b), |(i, j)| {
            fwd.v_image[i].0.dot(&fwd.audio[j])
        }))?;
        let s_feature = SimilarityMatrix::new(Array2::from_shape_fn((b, b), |(i, j)| {
            fwd.pairs[i * b + j].unit.dot(&fwd.audio[j])
        }))?;
        let mean_areas = Array2::from_shape_fn((b, b), |(i, j)| fwd.pairs[i * b + j].area);
        let (acl_i, ds_image) = info_nce_symmetric_grad(&s_image, self.loss.tau)?;
        let (acl_f, ds_feature) = info_nce_symmetric_grad(&s_feature, self.loss.tau)?;
        let reg = area_regularizer(mean_areas.view(), self.loss);
        let breakdown = LossBreakdown::compose(acl_i, acl_f, reg, self.loss);

        let grads = if with_grad {
            Some(self.backward(
                batch,
                params,
                &fwd,
                &(ds_image * self.loss.lambda_acl_i),
                &(ds_feature * self.loss.lambda_acl_f),
            )?)
        } else {
            None
        };
        Ok(BatchOutput {
            breakdown,
            s_image,
            s_feature,
            mean_areas,
            grads,
        })
    }

    fn backward(
        &self,
        batch: &[&PreparedSample],
        params: &Trainable,
        fwd: &Forward,
        ds_image: &Array2<f64>,
        ds_feature: &Array2<f64>,
    ) -> Result<Trainable> {
        let b = batch.len();
        let encoder = self.backends.image.as_ref();
        let w = params.w;

        // Image-level path: S^I -> v^I -> masked re-encoding -> positive mask.
        let positive: Vec<MaskGrads> = (0..b)
            .into_par_iter()
            .map(|i| {
                let (unit, norm) = &fwd.v_image[i];
                let mut d_unit = Array1::<f64>::zeros(unit.len());
                for j in 0..b {
                    d_unit.scaled_add(ds_image[[i, j]], &fwd.audio[j]);
                }
                let d_global = l2_normalize_backward(unit, *norm, &d_unit);
                let mask = fwd.pairs[i * b + i]
                    .positive
                    .as_ref()
                    .expect("diagonal mask");
                let x = &batch[i].image;
                let dx = encoder.global_vjp(&masked_image(x, mask.values())?, &d_global)?;
                let mut d_mask = (&dx * x.pixels()).sum_axis(Axis(0));
                let d_area = self.loss.lambda_reg
                    * area_regularizer_grad_entry(fwd.pairs[i * b + i].area, true, self.loss);
                if d_area != 0.0 {
                    let (h, wd) = x.size();
                    d_mask += d_area / (h * wd) as f64;
                }
                Ok(mask.backward(&d_mask, w))
            })
            .collect::<Result<_>>()?;

        // Every pair: feature path plus whatever the image masker produced,
        // pulled back through the grounder to the conditioning embedding.
        let per_pair: Vec<Array1<f64>> = (0..b * b)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / b, k % b);
                let p = &fwd.pairs[k];
                let vd = &batch[i].spatial;
                let a = &fwd.audio[j];
                let d_unit = a * ds_feature[[i, j]];
                let d_pooled = l2_normalize_backward(&p.unit, p.norm, &d_unit);
                let d_fm =
                    pool_weights_backward(vd, p.feature.values().view(), &p.pooled, &d_pooled);
                let mut d_logits = p.feature.backward(&d_fm)?;
                if i == j {
                    d_logits += &positive[i].logits;
                } else if let Some(g) = &p.reg_grads {
                    d_logits += &g.logits;
                }
                let mut d_a = self.backends.grounder.condition_vjp(vd, a, &d_logits)?;
                d_a.scaled_add(ds_feature[[i, j]], &p.unit);
                d_a.scaled_add(ds_image[[i, j]], &fwd.v_image[i].0);
                Ok(d_a)
            })
            .collect::<Result<_>>()?;

        let mut d_audio = vec![Array1::<f64>::zeros(fwd.audio[0].len()); b];
        for (k, d) in per_pair.iter().enumerate() {
            d_audio[k % b] += d;
        }

        let proj: Vec<ProjectionParams> = (0..b)
            .into_par_iter()
            .map(|j| {
                let mut g = params.projection.zeros_like();
                embed_features_backward(
                    &params.projection,
                    &fwd.embeds[j],
                    self.backends.tokens.as_ref(),
                    &d_audio[j],
                    &mut g,
                )?;
                Ok(g)
            })
            .collect::<Result<_>>()?;

        let mut grads = params.zeros_like();
        for g in &proj {
            grads.projection.add_assign(g);
        }
        for (k, p) in fwd.pairs.iter().enumerate() {
            let (i, j) = (k / b, k % b);
            let g = if i == j {
                Some(&positive[i])
            } else {
                p.reg_grads.as_ref()
            };
            if let Some(g) = g {
                grads.w += g.w;
                grads.b += g.b;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ToyConfig;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(b: usize, seed: u64) -> (Backends, Vec<PreparedSample>, Trainable) {
        let cfg = ToyConfig {
            seed,
            grid: 4,
            embed_dim: 6,
            audio_feature_dim: 5,
            token_dim: 4,
            n_bins: 8,
            n_fft: 16,
            hop_seconds: 0.25,
            ..ToyConfig::default()
        };
        let backends = Backends::toy(&cfg, 8, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let samples = (0..b)
            .map(|k| {
                let img = ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
                    rng.random_range(0.0..1.0)
                }))
                .unwrap();
                let wav: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                PreparedSample::encode(
                    format!("s{k}"),
                    img,
                    &AudioSegment::new(wav, 64).unwrap(),
                    &backends,
                )
                .unwrap()
            })
            .collect();
        let params = Trainable {
            projection: ProjectionParams::init(5, 7, 4, seed),
            w: 0.8,
            b: 0.1,
        };
        (backends, samples, params)
    }

    #[test]
    fn soft_surrogate_gradient_matches_central_differences() {
        let (backends, samples, mut params) = setup(2, 3);
        params.projection.attn.mapv_inplace(|_| 0.3);
        let template = PlaceholderTemplate::default();
        let loss = LossConfig::default();
        let masker = MaskerParams::default();
        let obj = Objective {
            backends: &backends,
            template: &template,
            loss: &loss,
            masker: &masker,
        };
        let batch: Vec<_> = samples.iter().collect();
        let noise = NoiseSource::Keyed {
            seed: 1,
            epoch: 0,
            step: 0,
        };
        let an = obj
            .evaluate(&batch, &params, noise, Surrogate::Soft, true)
            .unwrap()
            .grads
            .unwrap()
            .to_flat();
        let theta = params.to_flat();
        let h = 1e-5;
        let mut fd = vec![0.0; theta.len()];
        for k in 0..theta.len() {
            let mut p = params.clone();
            let mut t = theta.clone();
            t[k] += h;
            p.set_flat(&t);
            let up = obj
                .evaluate(&batch, &p, noise, Surrogate::Soft, false)
                .unwrap()
                .breakdown
                .loss;
            t[k] -= 2.0 * h;
            p.set_flat(&t);
            let dn = obj
                .evaluate(&batch, &p, noise, Surrogate::Soft, false)
                .unwrap()
                .breakdown
                .loss;
            fd[k] = (up - dn) / (2.0 * h);
        }
        let diff: f64 = an
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a - f).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-4, "rel err {}", diff / scale);
    }
}
