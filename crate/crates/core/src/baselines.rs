//! Deterministic regressors for the ablation: the denoiser's U-net with and
//! without attention, trained by plain MSE to output the normalized residual
//! from the condition alone. Also the carry-forward (zero change) reference.

use crate::cohort::{NormalizationStats, Subject};
use crate::denoiser::{ConditionRaw, Model, ModelKind};
use crate::diffusion::{
    baseline_condition, predict_trajectory, train, DiffusionConfig, LossRecord, PairingPolicy, PredictOptions,
    Prediction, TrainConfig, TrainJob, TrainSet,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineVariant {
    UnetAttention,
    UnetNoAttention,
}

impl BaselineVariant {
    pub fn kind(self) -> ModelKind {
        match self {
            BaselineVariant::UnetAttention => ModelKind::UnetAttn,
            BaselineVariant::UnetNoAttention => ModelKind::UnetPlain,
        }
    }
}

/// Trains a regression variant with the same optimizer, batching and seed
/// handling as the diffusion model.
pub fn train_deterministic(
    variant: BaselineVariant,
    widths: [usize; 3],
    set: &TrainSet,
    hyper: &TrainConfig,
    stats: &NormalizationStats,
    pairing: PairingPolicy,
    seed: u64,
) -> Result<(Model, Vec<LossRecord>)> {
    let kind = variant.kind();
    let job = TrainJob {
        kind,
        arch: kind.arch(widths),
        diffusion: DiffusionConfig::default(),
        hyper: hyper.clone(),
        stats,
        pairing,
        seed,
    };
    train(job, set, |_| {})
}

/// One thickness vector per month for a regression checkpoint. Uses no
/// randomness.
pub fn predict_deterministic(model: &Model, base: &ConditionRaw, months: &[u32]) -> Result<Vec<Vec<f64>>> {
    if model.kind().is_generative() {
        return Err(Error::Checkpoint(
            "predict_deterministic needs a unet_attn or unet_plain checkpoint".into(),
        ));
    }
    let opts = PredictOptions {
        months: months.to_vec(),
        realizations: 1,
        seed: 0,
        steps: None,
        threads: 1,
    };
    Ok(predict_trajectory(model, "", base, &opts)?
        .into_iter()
        .map(|mut per_month| per_month.remove(0))
        .collect())
}

/// Zero-change predictions: every month repeats the baseline thickness.
pub fn carry_forward(subjects: &[Subject], months: &[u32]) -> Vec<Prediction> {
    let mut out = Vec::with_capacity(subjects.len() * months.len());
    for s in subjects {
        let base = baseline_condition(s);
        for &m in months {
            out.push(Prediction {
                subject_id: s.id.clone(),
                target_month: m,
                realization: 0,
                cth: base.baseline_cth.clone(),
            });
        }
    }
    out
}
