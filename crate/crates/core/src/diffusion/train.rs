use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{denoising_loss, draw_loss_noise, regression_loss};
use super::{DiffusionConfig, PairingPolicy, TrainSet};
use crate::autodiff::{adam_step, AdamConfig, AdamState, NanPolicy, ParamStore};
use crate::cohort::NormalizationStats;
use crate::denoiser::{init_params, ArchConfig, CheckpointHeader, Model, ModelKind, Precond, TrainingMeta};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub nan_policy: NanPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 512,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            nan_policy: NanPolicy::Strict,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr", "must be finite and > 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Mean training noise level of the batch (0 for regression models).
    pub sigma_mean: f64,
    pub wallclock_ms: u64,
}

/// Owns the parameters and optimizer state while training.
pub struct Trainer {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub params: ParamStore<f32>,
    pub diffusion: DiffusionConfig,
    pub precond: Precond,
    adam: AdamState<f32>,
    adam_cfg: AdamConfig,
    nan_policy: NanPolicy,
    steps: usize,
}

impl Trainer {
    pub fn new(
        kind: ModelKind,
        arch: ArchConfig,
        diffusion: DiffusionConfig,
        sigma_data: f64,
        hyper: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        diffusion.validate()?;
        let params = init_params(&arch, &mut rng::stream(seed, Stream::Init))?;
        Ok(Self {
            kind,
            arch,
            adam: AdamState::new(&params),
            params,
            diffusion,
            precond: Precond { sigma_data },
            adam_cfg: hyper.adam(),
            nan_policy: hyper.nan_policy,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on a batch. Returns the loss and mean noise level.
    pub fn step(&mut self, x0: &[f64], cond: &[f32], rng: &mut rng::Rng) -> Result<(f64, f64)> {
        let (out, sigma_mean) = match self.kind {
            ModelKind::Diffusion => {
                let noise = draw_loss_noise(&self.diffusion, x0.len() / crate::N_ROI, rng);
                let out = denoising_loss(
                    &self.arch,
                    &self.params,
                    self.precond,
                    self.diffusion.loss_weighting,
                    x0,
                    cond,
                    &noise,
                )?;
                let sm = noise.sigmas.iter().sum::<f64>() / noise.sigmas.len() as f64;
                (out, sm)
            }
            ModelKind::UnetAttn | ModelKind::UnetPlain => (regression_loss(&self.arch, &self.params, x0, cond)?, 0.0),
        };
        adam_step(&mut self.params, &out.grads, &mut self.adam, &self.adam_cfg, self.nan_policy)?;
        self.steps += 1;
        Ok((out.loss, sigma_mean))
    }
}

/// Everything needed to train one model on a prepared set.
pub struct TrainJob<'a> {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub diffusion: DiffusionConfig,
    pub hyper: TrainConfig,
    pub stats: &'a NormalizationStats,
    pub pairing: PairingPolicy,
    pub seed: u64,
}

/// Trains over shuffled mini-batches for `hyper.epochs` epochs and returns
/// the model with its loss log. `on_record` sees every log row as it is
/// produced.
pub fn train(job: TrainJob<'_>, set: &TrainSet, mut on_record: impl FnMut(&LossRecord)) -> Result<(Model, Vec<LossRecord>)> {
    if set.is_empty() {
        return Err(Error::invalid("training set", "no training pairs"));
    }
    job.stats.validate()?;
    let sigma_data = set.sigma_data();
    if !(sigma_data > 0.0) {
        return Err(Error::invalid("training set", "targets have zero variance"));
    }
    let mut trainer = Trainer::new(job.kind, job.arch.clone(), job.diffusion.clone(), sigma_data, &job.hyper, job.seed)?;
    let mut rng = rng::stream(job.seed, Stream::Train);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let (mut bx, mut bc) = (Vec::new(), Vec::new());
    let mut log = Vec::new();
    let start = Instant::now();
    for epoch in 0..job.hyper.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(job.hyper.batch_size) {
            set.gather(idx, &mut bx, &mut bc);
            let batch = trainer.steps();
            let (loss, sigma_mean) = trainer.step(&bx, &bc, &mut rng).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { batch },
                other => other,
            })?;
            let rec = LossRecord {
                epoch,
                step: batch,
                loss,
                sigma_mean,
                wallclock_ms: start.elapsed().as_millis() as u64,
            };
            on_record(&rec);
            log.push(rec);
        }
    }
    let model = Model {
        header: CheckpointHeader {
            model_kind: job.kind,
            arch: job.arch,
            normalization: job.stats.clone(),
            sigma_data,
            diffusion: job.diffusion,
            training: TrainingMeta {
                epochs: job.hyper.epochs,
                batch_size: job.hyper.batch_size,
                lr: job.hyper.lr,
                optimizer_steps: trainer.steps(),
                n_pairs: set.len(),
                pairing: job.pairing,
                final_loss: log.last().map(|r| r.loss),
            },
            seed: job.seed,
        },
        params: trainer.params,
    };
    model.validate()?;
    Ok((model, log))
}

/// Writes the loss log as CSV.
pub fn write_loss_log<W: std::io::Write>(log: &[LossRecord], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    for r in log {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
