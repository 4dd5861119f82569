use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain squared error.
    Uniform,
    /// `λ(σ) = (σ² + σ_d²) / (σ·σ_d)²`.
    #[default]
    Edm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Heun,
    Euler,
}

/// Noise schedule, training noise distribution, loss weighting and sampler
/// budget. The forward process is variance exploding: `x_σ = x₀ + σ·n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Mean of `ln σ` during training.
    pub p_mean: f64,
    /// Std of `ln σ` during training.
    pub p_std: f64,
    pub loss_weighting: LossWeighting,
    pub sampler: SamplerKind,
    /// Denoiser-call budget of one sampling run.
    pub nfe: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
            loss_weighting: LossWeighting::Edm,
            sampler: SamplerKind::Heun,
            nfe: 1000,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::invalid("diffusion.sigma_min/sigma_max", "need 0 < sigma_min < sigma_max"));
        }
        if !(self.rho >= 1.0) {
            return Err(Error::invalid("diffusion.rho", "must be >= 1"));
        }
        if !(self.p_std >= 0.0 && self.p_mean.is_finite() && self.p_std.is_finite()) {
            return Err(Error::invalid("diffusion.p_std", "must be finite and >= 0"));
        }
        if self.nfe < 2 {
            return Err(Error::invalid("diffusion.nfe", "must be >= 2"));
        }
        if self.sampler == SamplerKind::Heun && self.nfe % 2 != 0 {
            return Err(Error::invalid("diffusion.nfe", "must be even for the Heun sampler"));
        }
        Ok(())
    }

    /// Schedule intervals that fit the NFE budget: Heun spends two calls per
    /// interval except the last, Euler one.
    pub fn steps(&self) -> usize {
        match self.sampler {
            SamplerKind::Heun => self.nfe / 2,
            SamplerKind::Euler => self.nfe,
        }
    }
}
