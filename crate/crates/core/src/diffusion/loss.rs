use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{sample_sigma_train, DiffusionConfig, LossWeighting};
use crate::autodiff::{ParamStore, Real, Tape, Tensor};
use crate::denoiser::unet::{self, ArchConfig, Bound};
use crate::denoiser::{Precond, COND_CHANNELS};
use crate::error::{Error, Result};
use crate::N_ROI;

/// Noise levels and unit noise for one batch, drawn item by item (σ first,
/// then 68 normals) so a batch is reproducible from the stream position.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNoise {
    pub sigmas: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn draw_loss_noise<R: Rng + ?Sized>(cfg: &DiffusionConfig, rows: usize, rng: &mut R) -> LossNoise {
    let mut sigmas = Vec::with_capacity(rows);
    let mut noise = Vec::with_capacity(rows * N_ROI);
    for _ in 0..rows {
        sigmas.push(sample_sigma_train(cfg, rng));
        noise.extend((0..N_ROI).map(|_| -> f64 { StandardNormal.sample(rng) }));
    }
    LossNoise { sigmas, noise }
}

/// Weight applied to `‖D − x₀‖²` at noise level `sigma`.
pub fn loss_weight(w: LossWeighting, sigma: f64, sigma_data: f64) -> f64 {
    match w {
        LossWeighting::Uniform => 1.0,
        LossWeighting::Edm => (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2),
    }
}

/// Scalar loss and its gradient with respect to every parameter.
pub struct LossOutput<T: Real> {
    pub loss: f64,
    pub grads: ParamStore<T>,
}

fn check_batch(x0: &[f64], cond: &[f32]) -> Result<usize> {
    let n = x0.len() / N_ROI;
    if n == 0 || x0.len() != n * N_ROI || cond.len() != n * COND_CHANNELS * N_ROI {
        return Err(Error::dim(
            "loss",
            format!("{} targets and {} condition values do not form a non-empty batch", x0.len(), cond.len()),
        ));
    }
    Ok(n)
}

/// `(1/N)·Σ_i w_i·‖F_i − t_i‖²` on a fresh tape, where `input` is the network
/// input and the per-item weights and targets are given in network-output
/// space.
fn weighted_mse<T: Real>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    input: Tensor<T>,
    c_noise: Option<&[f64]>,
    target: Vec<T>,
    weights: &[T],
) -> Result<LossOutput<T>> {
    let n = weights.len();
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let iv = tape.leaf(input);
    let f = unet::forward(arch, &bound, &mut tape, iv, c_noise)?;
    let t = tape.leaf(Tensor::new(vec![n, 1, N_ROI], target)?);
    let diff = tape.sub(f, t)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.scale_rows(sq, weights)?;
    let total = tape.sum(weighted);
    let loss = tape.scale(total, T::lit(1.0 / n as f64));
    let value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(loss, &Tensor::scalar(T::one()))?;
    let mut store = ParamStore::new();
    for (name, &v) in params.names().iter().zip(bound.vars()) {
        store.insert(name.clone(), grads.take(v).expect("parameter gradient"))?;
    }
    Ok(LossOutput { loss: value, grads: store })
}

/// Denoising loss `(1/N)·Σ λ(σ_i)·‖D(x₀ + σ_i·n_i; σ_i, y_i) − x₀‖²`.
///
/// Written in network-output space: with `D = c_skip·x + c_out·F` the item
/// loss equals `λ·c_out²·‖F − (x₀ − c_skip·x)/c_out‖²`.
pub fn denoising_loss<T: Real>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    precond: Precond,
    weighting: LossWeighting,
    x0: &[f64],
    cond: &[f32],
    noise: &LossNoise,
) -> Result<LossOutput<T>> {
    let n = check_batch(x0, cond)?;
    if noise.sigmas.len() != n || noise.noise.len() != x0.len() {
        return Err(Error::dim("loss", "noise does not match batch".to_string()));
    }
    let row = COND_CHANNELS * N_ROI;
    let mut input = Vec::with_capacity(n * (row + N_ROI));
    let mut target = Vec::with_capacity(n * N_ROI);
    let mut weights = Vec::with_capacity(n);
    let mut c_noise = Vec::with_capacity(n);
    for i in 0..n {
        let s = noise.sigmas[i];
        let (c_skip, c_out, c_in) = (precond.c_skip(s), precond.c_out(s), precond.c_in(s));
        for j in i * N_ROI..(i + 1) * N_ROI {
            let x = x0[j] + s * noise.noise[j];
            input.push(T::lit(c_in * x));
            target.push(T::lit((x0[j] - c_skip * x) / c_out));
        }
        input.extend(cond[i * row..(i + 1) * row].iter().map(|&v| T::lit(v as f64)));
        weights.push(T::lit(loss_weight(weighting, s, precond.sigma_data) * c_out * c_out));
        c_noise.push(precond.c_noise(s));
    }
    let input = Tensor::new(vec![n, arch.in_channels, N_ROI], input)?;
    let out = weighted_mse(arch, params, input, Some(&c_noise), target, &weights)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    Ok(out)
}

/// Supervised loss of the regression baselines: `(1/N)·Σ‖F(y_i) − x₀_i‖²`.
pub fn regression_loss<T: Real>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    x0: &[f64],
    cond: &[f32],
) -> Result<LossOutput<T>> {
    let n = check_batch(x0, cond)?;
    let input = Tensor::new(
        vec![n, arch.in_channels, N_ROI],
        cond.iter().map(|&v| T::lit(v as f64)).collect(),
    )?;
    let target = x0.iter().map(|&v| T::lit(v)).collect();
    let out = weighted_mse(arch, params, input, None, target, &vec![T::one(); n])?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    Ok(out)
}
