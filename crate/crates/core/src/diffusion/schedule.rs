use super::DiffusionConfig;
use crate::error::{Error, Result};

/// Karras et al. noise levels: `steps` values interpolated in `σ^{1/ρ}` from
/// `sigma_max` down to `sigma_min`, followed by a terminal 0.
pub fn sigma_schedule(cfg: &DiffusionConfig, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Domain("sigma schedule needs at least one step".into()));
    }
    cfg.validate()?;
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut out: Vec<f64> = if steps == 1 {
        vec![cfg.sigma_max]
    } else {
        (0..steps)
            .map(|i| (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(cfg.rho))
            .collect()
    };
    // Pin the endpoints against rounding in powf.
    out[0] = cfg.sigma_max;
    if steps > 1 {
        out[steps - 1] = cfg.sigma_min;
    }
    out.push(0.0);
    Ok(out)
}
