//! Audio-driven embedding: audio features → one continuous token → frozen
//! token encoder → unit-norm embedding `A`.
//!
//! The projection network is `MLP1 → attentive pooling → MLP2`:
//!
//! ```text
//! h_t   = gelu(W1 x_t + b1)
//! s_t   = attn · tanh(h_t)
//! α     = softmax_t(s)
//! token = W2 (Σ_t α_t h_t) + b2
//! ```

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::AudioSegment;
use crate::encoders::{AudioFeatureSequence, Backends, Token, TokenEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::ops::{gelu, gelu_grad, l2_normalize, l2_normalize_backward};
use crate::training::noise::mix_key;

/// Trainable weights of the projection network.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `D_h×D_a`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `D_tok×D_h`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// `D_h` attentive-pooling scorer.
    pub attn: Array1<f64>,
}

pub const PROJECTION_TENSORS: [&str; 5] = ["w1", "b1", "w2", "b2", "attn"];

impl ProjectionParams {
    /// Uniform fan-in initialization; the pooling scorer starts at zero so
    /// the initial pooling is a plain mean.
    pub fn init(audio_dim: usize, hidden_dim: usize, token_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[seed, 0x9A0_1EC7]));
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let w1 = uniform(hidden_dim, audio_dim, audio_dim);
        let b1 = uniform(1, hidden_dim, audio_dim).remove_axis(Axis(0));
        let w2 = uniform(token_dim, hidden_dim, hidden_dim);
        let b2 = uniform(1, token_dim, hidden_dim).remove_axis(Axis(0));
        Self {
            w1,
            b1,
            w2,
            b2,
            attn: Array1::zeros(hidden_dim),
        }
    }

    pub fn zeros(audio_dim: usize, hidden_dim: usize, token_dim: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden_dim, audio_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((token_dim, hidden_dim)),
            b2: Array1::zeros(token_dim),
            attn: Array1::zeros(hidden_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (a, h, t) = self.dims();
        Self::zeros(a, h, t)
    }

    /// `(D_a, D_h, D_tok)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w1.ncols(), self.w1.nrows(), self.w2.nrows())
    }

    pub fn tensors(&self) -> [(&'static str, Vec<usize>, &[f64]); 5] {
        [
            (
                "w1",
                self.w1.shape().to_vec(),
                self.w1.as_slice().expect("standard layout"),
            ),
            (
                "b1",
                self.b1.shape().to_vec(),
                self.b1.as_slice().expect("standard layout"),
            ),
            (
                "w2",
                self.w2.shape().to_vec(),
                self.w2.as_slice().expect("standard layout"),
            ),
            (
                "b2",
                self.b2.shape().to_vec(),
                self.b2.as_slice().expect("standard layout"),
            ),
            (
                "attn",
                self.attn.shape().to_vec(),
                self.attn.as_slice().expect("standard layout"),
            ),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.attn.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.num_params(),
            "flat parameter length mismatch"
        );
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
        self.attn += &other.attn;
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Intermediates of [`project_audio`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    tanh_hidden: Array2<f64>,
    alpha: Array1<f64>,
    pooled: Array1<f64>,
}

impl ProjectionTrace {
    pub fn attention(&self) -> &Array1<f64> {
        &self.alpha
    }
}

fn check_dims(seq: &AudioFeatureSequence, params: &ProjectionParams) -> Result<()> {
    if seq.dim() != params.w1.ncols() {
        return Err(Error::Shape(format!(
            "audio feature dim {} does not match projection input dim {}",
            seq.dim(),
            params.w1.ncols()
        )));
    }
    Ok(())
}

pub fn project_audio(seq: &AudioFeatureSequence, params: &ProjectionParams) -> Result<Array1<f64>> {
    project_audio_traced(seq, params).map(|(t, _)| t)
}

pub fn project_audio_traced(
    seq: &AudioFeatureSequence,
    params: &ProjectionParams,
) -> Result<(Array1<f64>, ProjectionTrace)> {
    check_dims(seq, params)?;
    let x = seq.features().clone();
    let pre = x.dot(&params.w1.t()) + &params.b1;
    let hidden = pre.mapv(gelu);
    let tanh_hidden = hidden.mapv(f64::tanh);
    let scores = tanh_hidden.dot(&params.attn);
    let m = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = scores.mapv(|s| (s - m).exp());
    let alpha = &e / e.sum();
    let pooled = alpha.dot(&hidden);
    let token = params.w2.dot(&pooled) + &params.b2;
    Ok((
        token,
        ProjectionTrace {
            x,
            pre,
            hidden,
            tanh_hidden,
            alpha,
            pooled,
        },
    ))
}

/// Accumulates `d<grad_token, token>/d params` into `grads`.
pub fn project_audio_backward(
    params: &ProjectionParams,
    trace: &ProjectionTrace,
    grad_token: &Array1<f64>,
    grads: &mut ProjectionParams,
) {
    let du = grad_token;
    grads.w2 += &outer(du, &trace.pooled);
    grads.b2 += du;
    let dp = params.w2.t().dot(du);

    let d_alpha = trace.hidden.dot(&dp);
    let mean = trace.alpha.dot(&d_alpha);
    let d_scores = &trace.alpha * &(d_alpha - mean);
    grads.attn += &trace.tanh_hidden.t().dot(&d_scores);

    let t = trace.x.nrows();
    let mut d_pre = Array2::<f64>::zeros(trace.pre.raw_dim());
    for i in 0..t {
        let a = trace.alpha[i];
        let ds = d_scores[i];
        for k in 0..dp.len() {
            let th = trace.tanh_hidden[[i, k]];
            let dh = a * dp[k] + ds * params.attn[k] * (1.0 - th * th);
            d_pre[[i, k]] = dh * gelu_grad(trace.pre[[i, k]]);
        }
    }
    grads.w1 += &d_pre.t().dot(&trace.x);
    grads.b1 += &d_pre.sum_axis(Axis(0));
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Fixed prompt the audio token is appended to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaceholderTemplate {
    pub text: String,
    pub start_id: u32,
    /// One id per whitespace-separated word of `text`.
    pub word_ids: Vec<u32>,
    pub end_id: u32,
}

impl Default for PlaceholderTemplate {
    fn default() -> Self {
        Self {
            text: "a photo of a".into(),
            start_id: 1,
            word_ids: vec![2, 3, 4, 2],
            end_id: 5,
        }
    }
}

impl PlaceholderTemplate {
    pub fn validate(&self) -> Result<()> {
        let words = self.text.split_whitespace().count();
        if words != self.word_ids.len() {
            return Err(Error::config(
                "backends.template.word_ids",
                format!("{} ids for {words} words", self.word_ids.len()),
            ));
        }
        Ok(())
    }

    /// Sequence length including start, end and the audio slot.
    pub fn sequence_len(&self) -> usize {
        self.word_ids.len() + 3
    }
}

/// `[start, words..., AUDIO, end]`
pub fn compose_tokens(
    audio_token: &Array1<f64>,
    template: &PlaceholderTemplate,
) -> Result<TokenSequence> {
    if audio_token.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite audio token".into()));
    }
    let mut tokens = Vec::with_capacity(template.sequence_len());
    tokens.push(Token::Id(template.start_id));
    tokens.extend(template.word_ids.iter().map(|&i| Token::Id(i)));
    tokens.push(Token::Continuous(audio_token.clone()));
    tokens.push(Token::Id(template.end_id));
    Ok(TokenSequence { tokens })
}

/// Unit-norm audio-driven embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioDrivenEmbedding(pub Array1<f64>);

#[derive(Debug, Clone)]
pub struct EmbeddingTrace {
    projection: ProjectionTrace,
    tokens: TokenSequence,
    unit: Array1<f64>,
    norm: f64,
}

impl EmbeddingTrace {
    pub fn projection(&self) -> &ProjectionTrace {
        &self.projection
    }
}

pub fn embed_features(
    seq: &AudioFeatureSequence,
    params: &ProjectionParams,
    tokens: &dyn TokenEncoder,
    template: &PlaceholderTemplate,
) -> Result<(AudioDrivenEmbedding, EmbeddingTrace)> {
    let (token, projection) = project_audio_traced(seq, params)?;
    let seq_tokens = compose_tokens(&token, template)?;
    let ctx = tokens.encode(&seq_tokens)?;
    let (unit, norm) = l2_normalize(&ctx.0);
    Ok((
        AudioDrivenEmbedding(unit.clone()),
        EmbeddingTrace {
            projection,
            tokens: seq_tokens,
            unit,
            norm,
        },
    ))
}

/// Accumulates `d<grad, A>/d params` into `grads`.
pub fn embed_features_backward(
    params: &ProjectionParams,
    trace: &EmbeddingTrace,
    tokens: &dyn TokenEncoder,
    grad: &Array1<f64>,
    grads: &mut ProjectionParams,
) -> Result<()> {
    let d_ctx = l2_normalize_backward(&trace.unit, trace.norm, grad);
    let d_tokens = tokens.continuous_vjp(&trace.tokens, &d_ctx)?;
    let [d_token] = <[Array1<f64>; 1]>::try_from(d_tokens)
        .map_err(|_| Error::Shape("expected exactly one continuous token".into()))?;
    project_audio_backward(params, &trace.projection, &d_token, grads);
    Ok(())
}

pub fn embed_audio(
    audio: &AudioSegment,
    params: &ProjectionParams,
    backends: &Backends,
    template: &PlaceholderTemplate,
) -> Result<AudioDrivenEmbedding> {
    let seq = backends.audio.encode(audio)?;
    embed_features(&seq, params, backends.tokens.as_ref(), template).map(|(a, _)| a)
}
