//! Optimization loop: seeded batch order, the full objective, Adam on the
//! trainable partition only, per-epoch checkpoints.

mod adam;
mod checkpoint;
pub mod noise;
mod objective;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::LossConfig;
use crate::audio_embedder::{PlaceholderTemplate, ProjectionParams};
use crate::datamodel::{
    load_audio, load_image, preprocess_audio, preprocess_image, AudioPrepConfig, Dataset,
    ImagePrepConfig,
};
use crate::encoders::Backends;
use crate::error::{Error, Result};
use crate::grounding::MaskerParams;

pub use adam::{AdamConfig, AdamState, WeightDecayMode};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use objective::{
    Anchors, BatchOutput, NoiseSource, Objective, PreparedSample, Surrogate, Trainable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub seed: u64,
    /// Hidden width of the audio projection network.
    pub hidden_dim: usize,
    pub loss: LossConfig,
    /// Initial `w`, `b` and the fixed masker settings.
    pub masker: MaskerParams,
    pub template: PlaceholderTemplate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            weight_decay_mode: WeightDecayMode::Coupled,
            seed: 0,
            hidden_dim: 64,
            loss: LossConfig::default(),
            masker: MaskerParams::default(),
            template: PlaceholderTemplate::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("train.hidden_dim", "must be >= 1"));
        }
        self.loss.validate()?;
        self.masker.validate()?;
        self.template.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(
            self.learning_rate,
            self.weight_decay,
            self.weight_decay_mode,
        )
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size
    }
}

const PROJECTION_SEED_STREAM: u64 = 0x50_4A;

pub fn initial_params(cfg: &TrainConfig, backends: &Backends) -> Trainable {
    Trainable {
        projection: ProjectionParams::init(
            backends.audio.feature_dim(),
            cfg.hidden_dim,
            backends.tokens.token_dim(),
            noise::mix_key(&[cfg.seed, PROJECTION_SEED_STREAM]),
        ),
        w: cfg.masker.w,
        b: cfg.masker.b,
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub acl_i: f64,
    pub acl_f: f64,
    pub reg: f64,
    pub mask_area_pos_mean: f64,
}

/// Load, preprocess and encode every record of a manifest once.
pub fn prepare_dataset(
    dataset: &Dataset,
    audio_cfg: &AudioPrepConfig,
    image_cfg: &ImagePrepConfig,
    backends: &Backends,
) -> Result<Vec<PreparedSample>> {
    use rayon::prelude::*;
    dataset
        .records
        .par_iter()
        .map(|r| {
            let raw = load_image(dataset.resolve(&r.image_path))?;
            let image = preprocess_image(&raw, image_cfg)?;
            let (wav, sr) = load_audio(dataset.resolve(&r.audio_path))?;
            let audio = preprocess_audio(&wav, sr, audio_cfg)?;
            PreparedSample::encode(r.id.clone(), image, &audio, backends)
        })
        .collect()
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    backends: &'a Backends,
    samples: &'a [PreparedSample],
    params: Trainable,
    adam: AdamState,
    epoch: usize,
    step: usize,
    digest: String,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        backends: &'a Backends,
        samples: &'a [PreparedSample],
    ) -> Result<Self> {
        cfg.validate()?;
        if samples.len() < cfg.batch_size {
            return Err(Error::Validation(format!(
                "{} training samples cannot fill one batch of {}",
                samples.len(),
                cfg.batch_size
            )));
        }
        let params = initial_params(&cfg, backends);
        let adam = AdamState::new(params.len());
        Ok(Self {
            cfg,
            backends,
            samples,
            params,
            adam,
            epoch: 0,
            step: 0,
            digest: backends.digest(),
        })
    }

    pub fn resume(
        ckpt: &Checkpoint,
        backends: &'a Backends,
        samples: &'a [PreparedSample],
    ) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), backends, samples)?;
        if ckpt.backend_digest != t.digest {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained against backends {} but {} are loaded",
                ckpt.backend_digest, t.digest
            )));
        }
        if ckpt.params.len() != t.params.len() {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the configured model".into(),
            ));
        }
        t.params = ckpt.params.clone();
        t.adam = ckpt.adam.clone();
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Trainable {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective {
            backends: self.backends,
            template: &self.cfg.template,
            loss: &self.cfg.loss,
            masker: &self.cfg.masker,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            backend_digest: self.digest.clone(),
        }
    }

    /// Forward, backward and one Adam update on the given sample indices.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<StepRecord> {
        let batch: Vec<&PreparedSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let noise = NoiseSource::Keyed {
            seed: self.cfg.seed,
            epoch: self.epoch,
            step: self.step,
        };
        let out = self.objective().evaluate(
            &batch,
            &self.params,
            noise,
            Surrogate::StraightThrough,
            true,
        )?;
        let br = out.breakdown;
        if !br.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                loss: br.loss,
                acl_i: br.acl_i,
                acl_f: br.acl_f,
                reg: br.reg,
            });
        }
        let grads = out.grads.as_ref().expect("gradients requested").to_flat();
        let mut theta = self.params.to_flat();
        self.adam.step(&self.cfg.adam(), &mut theta, &grads);
        self.params.set_flat(&theta);
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
                loss: f64::NAN,
                acl_i: br.acl_i,
                acl_f: br.acl_f,
                reg: br.reg,
            });
        }
        let rec = StepRecord {
            epoch: self.epoch,
            step: self.step,
            loss: br.loss,
            acl_i: br.acl_i,
            acl_f: br.acl_f,
            reg: br.reg,
            mask_area_pos_mean: out.mask_area_pos_mean(),
        };
        self.step += 1;
        Ok(rec)
    }

    /// Run one epoch over the seeded order, dropping the incomplete tail batch.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        crate::datamodel::shuffle_order(&mut order, self.cfg.seed, self.epoch);
        for chunk in order.chunks_exact(self.cfg.batch_size) {
            let rec = self.train_step(chunk)?;
            on_step(&rec)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Train until the configured number of epochs, calling `on_epoch` with a
    /// checkpoint after each one, then verify the backends are untouched.
    pub fn run(
        &mut self,
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Checkpoint> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(on_step)?;
            on_epoch(&self.checkpoint())?;
        }
        let after = self.backends.digest();
        if after != self.digest {
            return Err(Error::BackendMutated {
                before: self.digest.clone(),
                after,
            });
        }
        Ok(self.checkpoint())
    }
}

/// Full run. With `checkpoint_dir`, writes `epoch_XXX.ckpt` after each epoch.
pub fn train(
    cfg: TrainConfig,
    backends: &Backends,
    samples: &[PreparedSample],
    checkpoint_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg, backends, samples)?;
    trainer.run(on_step, &mut |ck| save_epoch_checkpoint(checkpoint_dir, ck))
}

pub fn save_epoch_checkpoint(dir: Option<&Path>, ck: &Checkpoint) -> Result<()> {
    match dir {
        Some(d) => ck.save(d.join(epoch_checkpoint_name(ck.epoch))),
        None => Ok(()),
    }
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}
