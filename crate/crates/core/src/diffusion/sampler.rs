use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{sigma_schedule, DiffusionConfig, SamplerKind};
use crate::denoiser::Denoise;
use crate::error::{Error, Result};

/// `x₀ + σ·n` with one standard-normal draw per element (drawn even when
/// `σ = 0`, so the stream position does not depend on `σ`).
pub fn perturb<R: Rng + ?Sized>(x0: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("perturb needs sigma >= 0, got {sigma}")));
    }
    Ok(x0
        .iter()
        .map(|&x| {
            let n: f64 = StandardNormal.sample(rng);
            x + sigma * n
        })
        .collect())
}

/// Training noise level `exp(P_mean + P_std·z)`.
pub fn sample_sigma_train<R: Rng + ?Sized>(cfg: &DiffusionConfig, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * z).exp()
}

/// Initial sampler state `σ₀·n`.
pub fn initial_noise<R: Rng + ?Sized>(len: usize, sigma0: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            sigma0 * n
        })
        .collect()
}

fn slope<D: Denoise + ?Sized>(den: &D, x: &[f64], sigma: f64, buf: &mut [f64]) -> Result<()> {
    den.denoise(x, sigma, buf)?;
    for (d, &xv) in buf.iter_mut().zip(x) {
        *d = (xv - *d) / sigma;
    }
    Ok(())
}

fn check(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Sampling { step })
    }
}

/// Integrates the probability-flow ODE `dx/dσ = (x − D(x; σ))/σ` along
/// `sigmas` with Heun's method, finishing with an Euler step into σ = 0.
/// `x` holds the initial state and is overwritten. Returns the number of
/// denoiser calls.
pub fn heun_sample<D: Denoise + ?Sized>(den: &D, sigmas: &[f64], x: &mut [f64]) -> Result<usize> {
    let mut nfe = 0;
    let mut d = vec![0.0; x.len()];
    let mut d2 = vec![0.0; x.len()];
    let mut xp = vec![0.0; x.len()];
    for (i, w) in sigmas.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let h = s_next - s;
        slope(den, x, s, &mut d)?;
        nfe += 1;
        for ((p, &xv), &dv) in xp.iter_mut().zip(x.iter()).zip(&d) {
            *p = xv + h * dv;
        }
        if s_next > 0.0 {
            slope(den, &xp, s_next, &mut d2)?;
            nfe += 1;
            for ((xv, &a), &b) in x.iter_mut().zip(&d).zip(&d2) {
                *xv += h * 0.5 * (a + b);
            }
        } else {
            x.copy_from_slice(&xp);
        }
        check(x, i)?;
    }
    Ok(nfe)
}

/// First-order counterpart of [`heun_sample`].
pub fn euler_sample<D: Denoise + ?Sized>(den: &D, sigmas: &[f64], x: &mut [f64]) -> Result<usize> {
    let mut d = vec![0.0; x.len()];
    for (i, w) in sigmas.windows(2).enumerate() {
        slope(den, x, w[0], &mut d)?;
        let h = w[1] - w[0];
        for (xv, &dv) in x.iter_mut().zip(&d) {
            *xv += h * dv;
        }
        check(x, i)?;
    }
    Ok(sigmas.len().saturating_sub(1))
}

/// Draws an initial state of `len` values from `rng` and runs the configured
/// sampler over `steps` schedule intervals.
pub fn sample<D: Denoise + ?Sized, R: Rng + ?Sized>(
    den: &D,
    cfg: &DiffusionConfig,
    steps: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sigmas = sigma_schedule(cfg, steps)?;
    let mut x = initial_noise(len, sigmas[0], rng);
    run(den, cfg.sampler, &sigmas, &mut x)?;
    Ok(x)
}

/// Runs the chosen integrator on an already initialized state.
pub fn run<D: Denoise + ?Sized>(den: &D, kind: SamplerKind, sigmas: &[f64], x: &mut [f64]) -> Result<usize> {
    match kind {
        SamplerKind::Heun => heun_sample(den, sigmas, x),
        SamplerKind::Euler => euler_sample(den, sigmas, x),
    }
}
