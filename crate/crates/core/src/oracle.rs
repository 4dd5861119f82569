//! Closed-form Gaussian world for checking the sampler, the loss and trained
//! denoisers. With a diagonal prior `N(m, s²)` and noise level `σ`, the
//! posterior mean is `(s²·x + σ²·m)/(s² + σ²)` and the score of the
//! perturbed marginal is `(m − x)/(s² + σ²)`.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::denoiser::Denoise;
use crate::diffusion::{heun_sample, initial_noise, sigma_schedule, DiffusionConfig};
use crate::error::{Error, Result};
use crate::rng;

/// Diagonal Gaussian prior. `std` entries may be zero (point mass).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let p = Self { mean, std };
        p.validate()?;
        Ok(p)
    }

    pub fn isotropic(dim: usize, mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![std; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() {
            return Err(Error::dim(
                "gaussian prior",
                format!("{} means vs {} stds", self.mean.len(), self.std.len()),
            ));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("gaussian prior", "means must be finite and stds finite and >= 0"));
        }
        Ok(())
    }

    /// Draws `n` rows from the prior.
    pub fn sample<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            let z = initial_noise(self.dim(), 1.0, rng);
            out.extend(self.mean.iter().zip(&self.std).zip(z).map(|((m, s), z)| m + s * z));
        }
        out
    }

    fn check_rows(&self, x: &[f64]) -> Result<()> {
        if x.len() % self.dim() != 0 {
            return Err(Error::dim(
                "gaussian oracle",
                format!("{} values are not rows of {}", x.len(), self.dim()),
            ));
        }
        Ok(())
    }
}

/// Exact posterior mean `E[x₀ | x]` at noise level `sigma`, row by row.
pub fn analytic_denoiser(prior: &GaussianPrior, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    prior.denoise(x, sigma, &mut out)?;
    Ok(out)
}

/// Exact score `∇ log N(x; m, s² + σ²)`, row by row.
pub fn analytic_score(prior: &GaussianPrior, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    prior.check_rows(x)?;
    let d = prior.dim();
    x.iter()
        .enumerate()
        .map(|(i, &xv)| {
            let (m, s) = (prior.mean[i % d], prior.std[i % d]);
            let v = s * s + sigma * sigma;
            if v > 0.0 {
                Ok((m - xv) / v)
            } else {
                Err(Error::Domain("score undefined when s = sigma = 0".into()))
            }
        })
        .collect()
}

impl Denoise for GaussianPrior {
    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<()> {
        if !(sigma >= 0.0) {
            return Err(Error::Domain(format!("denoise needs sigma >= 0, got {sigma}")));
        }
        self.check_rows(x)?;
        if out.len() != x.len() {
            return Err(Error::dim("gaussian oracle", "output length differs from input".to_string()));
        }
        let d = self.dim();
        let s2 = sigma * sigma;
        for (i, (o, &xv)) in out.iter_mut().zip(x).enumerate() {
            let (m, s) = (self.mean[i % d], self.std[i % d]);
            let v = s * s;
            *o = if v + s2 == 0.0 { xv } else { (v * xv + s2 * m) / (v + s2) };
        }
        Ok(())
    }
}

/// Runs the production Heun sampler with the analytic denoiser and returns
/// `n_samples` rows drawn from `seed`.
pub fn oracle_sample(prior: &GaussianPrior, cfg: &DiffusionConfig, steps: usize, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    prior.validate()?;
    if steps < 2 {
        return Err(Error::invalid("steps", "oracle sampling needs at least 2 steps"));
    }
    let sigmas = sigma_schedule(cfg, steps)?;
    let mut rng = rng::labeled(seed, "oracle");
    let mut x = initial_noise(n_samples * prior.dim(), sigmas[0], &mut rng);
    heun_sample(prior, &sigmas, &mut x)?;
    Ok(x)
}

/// Exact solution of the probability-flow ODE carried from `sigma_from` to
/// `sigma_to`: every coordinate follows `m + (x − m)·√((s² + σ²)/(s² + σ₀²))`.
pub fn exact_flow(prior: &GaussianPrior, x: &[f64], sigma_from: f64, sigma_to: f64) -> Vec<f64> {
    let d = prior.dim();
    x.iter()
        .enumerate()
        .map(|(i, &xv)| {
            let (m, s) = (prior.mean[i % d], prior.std[i % d]);
            let v = s * s;
            m + (xv - m) * ((v + sigma_to * sigma_to) / (v + sigma_from * sigma_from)).sqrt()
        })
        .collect()
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `samples` and
/// `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("samples", format!("need at least 2, got {}", samples.len())));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("ks samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// CDF of `N(mean, std²)`.
pub fn normal_cdf(mean: f64, std: f64) -> Result<impl Fn(f64) -> f64> {
    let n = Normal::new(mean, std).map_err(|e| Error::Domain(format!("normal cdf: {e}")))?;
    Ok(move |x| n.cdf(x))
}

/// Largest per-dimension KS distance between sampled rows and the prior
/// marginals.
pub fn max_ks(prior: &GaussianPrior, rows: &[f64]) -> Result<f64> {
    let d = prior.dim();
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let col: Vec<f64> = rows.iter().skip(j).step_by(d).copied().collect();
        worst = worst.max(ks_statistic(&col, normal_cdf(prior.mean[j], prior.std[j])?)?);
    }
    Ok(worst)
}

/// Median over seeds of `err(N)/err(N')` for Heun endpoint errors on a
/// narrow prior, for each consecutive pair in `steps`.
pub fn order_ratios(prior: &GaussianPrior, cfg: &DiffusionConfig, steps: &[usize], seeds: &[u64]) -> Result<Vec<f64>> {
    let mut errs = vec![Vec::with_capacity(seeds.len()); steps.len()];
    for &seed in seeds {
        let mut rng = rng::labeled(seed, "oracle-order");
        let start = initial_noise(prior.dim(), cfg.sigma_max, &mut rng);
        // The closing Euler step into σ = 0 is the posterior mean, so the
        // reference applies it to the exact state at σ_min.
        let at_min = exact_flow(prior, &start, cfg.sigma_max, cfg.sigma_min);
        let exact = analytic_denoiser(prior, &at_min, cfg.sigma_min)?;
        for (slot, &n) in errs.iter_mut().zip(steps) {
            let mut x = start.clone();
            heun_sample(prior, &sigma_schedule(cfg, n)?, &mut x)?;
            let e = x.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            slot.push(e);
        }
    }
    let mut out = Vec::new();
    for w in errs.windows(2) {
        let mut r: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| a / b).collect();
        r.sort_by(f64::total_cmp);
        out.push(median_sorted(&r));
    }
    Ok(out)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of the `oracle-check` table.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

/// Runs the sampler invariants with the analytic denoiser.
pub fn run_checks(steps: usize, samples: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let cfg = DiffusionConfig::default();
    let dim = crate::N_ROI;
    let mut rows = Vec::new();

    let std_prior = GaussianPrior::isotropic(dim, 0.0, 1.0)?;
    let mut rng = rng::labeled(seed, "oracle-probe");
    let x = initial_noise(1000 * dim, 2.0, &mut rng);
    let mut worst: f64 = 0.0;
    for (i, &sigma) in [0.01, 0.1, 1.0, 10.0].iter().enumerate() {
        let chunk = &x[i * 250 * dim..(i + 1) * 250 * dim];
        let d = analytic_denoiser(&std_prior, chunk, sigma)?;
        let s = analytic_score(&std_prior, chunk, sigma)?;
        for ((dv, sv), xv) in d.iter().zip(&s).zip(chunk) {
            let lhs = sv * sigma * sigma + xv;
            worst = worst.max((lhs - dv).abs() / dv.abs().max(xv.abs()));
        }
    }
    rows.push(CheckRow {
        name: "score_identity_rel_err",
        value: worst,
        threshold: "< 1e-12".into(),
        pass: worst < 1e-12,
    });

    let drawn = oracle_sample(&std_prior, &cfg, steps, samples, seed)?;
    let ks = max_ks(&std_prior, &drawn)?;
    rows.push(CheckRow {
        name: "max_ks_vs_prior",
        value: ks,
        threshold: "< 0.02".into(),
        pass: ks < 0.02,
    });

    let mean: Vec<f64> = (0..dim).map(|j| (j as f64 / dim as f64) - 0.5).collect();
    let point = GaussianPrior::new(mean.clone(), vec![0.0; dim])?;
    let drawn = oracle_sample(&point, &cfg, steps, samples.min(1000), seed)?;
    let err = drawn
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % dim]).abs())
        .fold(0.0, f64::max);
    rows.push(CheckRow {
        name: "point_mass_endpoint_err",
        value: err,
        threshold: "< 1e-3".into(),
        pass: err < 1e-3,
    });

    let narrow = GaussianPrior::isotropic(dim, 0.0, ORDER_PRIOR_STD)?;
    let ratios = order_ratios(&narrow, &cfg, &ORDER_STEPS, &[seed, seed + 1, seed + 2])?;
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let r = median_sorted(&sorted);
    rows.push(CheckRow {
        name: "heun_order_ratio",
        value: r,
        threshold: "in [3, 5]".into(),
        pass: (3.0..=5.0).contains(&r),
    });
    Ok(rows)
}

/// Prior std used by the convergence-order check. A strict point mass makes
/// the flow linear in σ, which Heun integrates exactly.
pub const ORDER_PRIOR_STD: f64 = 0.25;

/// Step counts forming the octave ladder of the convergence-order check.
pub const ORDER_STEPS: [usize; 4] = [16, 32, 64, 128];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn closed_form_values() {
        let p = GaussianPrior::isotropic(1, 0.0, 1.0).unwrap();
        assert_relative_eq!(analytic_denoiser(&p, &[2.0], 1.0).unwrap()[0], 1.0);
        assert_relative_eq!(analytic_score(&p, &[2.0], 1.0).unwrap()[0], -1.0);
        let q = GaussianPrior::isotropic(1, 3.0, 2.0).unwrap();
        assert_relative_eq!(analytic_score(&q, &[0.0], 1.0).unwrap()[0], 0.6, epsilon = 1e-15);
        assert_eq!(analytic_score(&q, &[3.0], 0.7).unwrap()[0], 0.0);
    }

    #[test]
    fn limits() {
        let p = GaussianPrior::new(vec![0.5, -1.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(analytic_denoiser(&p, &[3.0, 4.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(analytic_denoiser(&p, &[3.0, 4.0], 2.0).unwrap()[1], -1.0);
        assert!(matches!(analytic_score(&p, &[0.0, 0.0], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ks_constructions() {
        let n = 999;
        let f = normal_cdf(0.0, 1.0).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let q: Vec<f64> = (1..=n).map(|i| normal.inverse_cdf(i as f64 / (n + 1) as f64)).collect();
        assert!(ks_statistic(&q, &f).unwrap() <= 1.0 / (n + 1) as f64 + 1e-9);
        assert!(ks_statistic(&[0.0; 10], &f).unwrap() >= 0.5);
        assert!(ks_statistic(&[1.0], &f).is_err());
        assert!(ks_statistic(&[], &f).is_err());
    }

    #[test]
    fn standard_normal_draws_pass_ks() {
        let mut rng = rng::labeled(11, "ks");
        let z = initial_noise(10_000, 1.0, &mut rng);
        assert!(ks_statistic(&z, normal_cdf(0.0, 1.0).unwrap()).unwrap() < 0.02);
    }

    #[test]
    fn exact_endpoint_solves_the_flow() {
        // Fine Heun integration converges to the closed-form endpoint.
        let p = GaussianPrior::isotropic(3, 0.2, 0.5).unwrap();
        let cfg = DiffusionConfig::default();
        let start = vec![30.0, -12.0, 5.0];
        let mut x = start.clone();
        heun_sample(&p, &sigma_schedule(&cfg, 2000).unwrap(), &mut x).unwrap();
        let want = exact_flow(&p, &start, cfg.sigma_max, 0.0);
        for (a, b) in x.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn score_identity_on_random_probes(
            m in -3.0f64..3.0, s in 0.05f64..3.0, sigma in 1e-3f64..50.0, x in -100.0f64..100.0,
        ) {
            let p = GaussianPrior::isotropic(1, m, s).unwrap();
            let d = analytic_denoiser(&p, &[x], sigma).unwrap()[0];
            let sc = analytic_score(&p, &[x], sigma).unwrap()[0];
            let lhs = sc * sigma * sigma + x;
            prop_assert!((lhs - d).abs() <= 1e-12 * d.abs().max(x.abs()));
        }
    }
}
