//! The conditional denoiser `D(x; σ, y)`: a 1D attention U-net wrapped in
//! EDM preconditioning, plus condition encoding and the checkpoint format.

pub mod checkpoint;
mod condition;
pub mod unet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::cohort::NormalizationStats;
use crate::error::{Error, Result};
use crate::N_ROI;

pub use checkpoint::{CheckpointHeader, TrainingMeta};
pub use condition::{
    decode_condition, encode_condition, encode_condition_into, ConditionRaw, DecodedCondition, COND_CHANNELS,
    DELTA_SCALE_MONTHS,
};
pub use unet::{init_params, ArchConfig};

/// Anything that maps noisy rows of length 68 at noise level `sigma` to
/// denoised rows. Implemented by the trained network and by the analytic
/// Gaussian oracle so both run through the same sampler.
pub trait Denoise {
    /// `x` and `out` hold the same number of rows of `N_ROI` values.
    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<()>;
}

/// Score from a denoiser: `(D(x; σ) − x) / σ²`.
pub fn score<D: Denoise + ?Sized>(den: &D, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("score needs sigma > 0, got {sigma}")));
    }
    let mut d = vec![0.0; x.len()];
    den.denoise(x, sigma, &mut d)?;
    let s2 = sigma * sigma;
    Ok(d.iter().zip(x).map(|(d, x)| (d - x) / s2).collect())
}

/// EDM preconditioning constants for a given data std `σ_d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub sigma_data: f64,
}

impl Precond {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    UnetAttn,
    UnetPlain,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Diffusion => "diffusion",
            ModelKind::UnetAttn => "unet_attn",
            ModelKind::UnetPlain => "unet_plain",
        }
    }

    /// Architecture of this kind at the given widths. The three kinds differ
    /// only in the noisy input channel, the sigma embedding and attention.
    pub fn arch(self, widths: [usize; 3]) -> ArchConfig {
        match self {
            ModelKind::Diffusion => ArchConfig::diffusion(widths),
            ModelKind::UnetAttn => ArchConfig::regression(widths, true),
            ModelKind::UnetPlain => ArchConfig::regression(widths, false),
        }
    }

    pub fn is_generative(self) -> bool {
        self == ModelKind::Diffusion
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(ModelKind::Diffusion),
            "unet_attn" => Ok(ModelKind::UnetAttn),
            "unet_plain" => Ok(ModelKind::UnetPlain),
            other => Err(Error::invalid(
                "model",
                format!("`{other}` is not one of diffusion, unet_attn, unet_plain"),
            )),
        }
    }
}

/// A trained (or freshly initialized) network with everything needed to
/// run it on raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        self.header.model_kind
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.header.arch
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.header.normalization
    }

    pub fn precond(&self) -> Precond {
        Precond {
            sigma_data: self.header.sigma_data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        unet::validate_params(&self.header.arch, &self.params)
    }

    /// Network output `F` for a batch: `x_in` holds `[N, 68]` scaled inputs
    /// (ignored for regression models), `cond` `[N, 7, 68]`, `c_noise` one
    /// value per row (diffusion only). Returns `[N, 68]`.
    pub fn raw_forward(&self, x_in: Option<&[f64]>, c_noise: Option<&[f64]>, cond: &[f32]) -> Result<Vec<f64>> {
        raw_forward(&self.header.arch, &self.params, x_in, c_noise, cond)
    }

    /// Binds per-row conditions so the model can serve as a [`Denoise`].
    pub fn conditioned<'m>(&'m self, cond: &'m [f32]) -> Result<ConditionedModel<'m>> {
        if self.kind() != ModelKind::Diffusion {
            return Err(Error::invalid("model", "only diffusion checkpoints are denoisers"));
        }
        if cond.len() % (COND_CHANNELS * N_ROI) != 0 {
            return Err(Error::dim("conditioned", format!("condition buffer of {} values", cond.len())));
        }
        Ok(ConditionedModel { model: self, cond })
    }
}

/// Builds the `[N, in_channels, 68]` network input and runs the U-net.
pub fn raw_forward(
    arch: &ArchConfig,
    params: &ParamStore<f32>,
    x_in: Option<&[f64]>,
    c_noise: Option<&[f64]>,
    cond: &[f32],
) -> Result<Vec<f64>> {
    let row = COND_CHANNELS * N_ROI;
    if cond.is_empty() || cond.len() % row != 0 {
        return Err(Error::dim("raw_forward", format!("condition buffer of {} values", cond.len())));
    }
    let n = cond.len() / row;
    let input = build_input(arch, x_in, cond, n)?;
    let mut tape = Tape::new();
    let bound = unet::Bound::new(params, &mut tape);
    let iv = tape.leaf(input);
    let out = unet::forward(arch, &bound, &mut tape, iv, c_noise)?;
    Ok(tape.value(out).data().iter().map(|&v| v as f64).collect())
}

/// Concatenates the (optional) noisy channel in front of the condition.
pub(crate) fn build_input(arch: &ArchConfig, x_in: Option<&[f64]>, cond: &[f32], n: usize) -> Result<Tensor<f32>> {
    let row = COND_CHANNELS * N_ROI;
    let with_x = arch.in_channels == COND_CHANNELS + 1;
    if !with_x && arch.in_channels != COND_CHANNELS {
        return Err(Error::dim("raw_forward", format!("unsupported in_channels {}", arch.in_channels)));
    }
    let mut data = Vec::with_capacity(n * arch.in_channels * N_ROI);
    for i in 0..n {
        if with_x {
            let x = x_in.ok_or_else(|| Error::invalid("x_in", "required by the denoiser input"))?;
            if x.len() != n * N_ROI {
                return Err(Error::dim("raw_forward", format!("{} inputs for {n} rows", x.len())));
            }
            data.extend(x[i * N_ROI..(i + 1) * N_ROI].iter().map(|&v| v as f32));
        }
        data.extend_from_slice(&cond[i * row..(i + 1) * row]);
    }
    Tensor::new(vec![n, arch.in_channels, N_ROI], data)
}

/// A diffusion model with one encoded condition per row.
pub struct ConditionedModel<'m> {
    model: &'m Model,
    cond: &'m [f32],
}

impl ConditionedModel<'_> {
    pub fn rows(&self) -> usize {
        self.cond.len() / (COND_CHANNELS * N_ROI)
    }

    /// `D = c_skip·x + c_out·F(c_in·x, c_noise, y)`, also returning `F`.
    pub fn denoise_with_raw(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<Vec<f64>> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("denoise needs sigma > 0, got {sigma}")));
        }
        let n = self.rows();
        if x.len() != n * N_ROI || out.len() != x.len() {
            return Err(Error::dim(
                "denoise",
                format!("{} inputs / {} outputs for {n} conditioned rows", x.len(), out.len()),
            ));
        }
        let pc = self.model.precond();
        let (c_skip, c_out, c_in) = (pc.c_skip(sigma), pc.c_out(sigma), pc.c_in(sigma));
        let scaled: Vec<f64> = x.iter().map(|v| c_in * v).collect();
        let c_noise = vec![pc.c_noise(sigma); n];
        let f = self.model.raw_forward(Some(&scaled), Some(&c_noise), self.cond)?;
        for ((o, &xv), &fv) in out.iter_mut().zip(x).zip(&f) {
            *o = c_skip * xv + c_out * fv;
        }
        Ok(f)
    }
}

impl Denoise for ConditionedModel<'_> {
    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<()> {
        self.denoise_with_raw(x, sigma, out).map(|_| ())
    }
}
