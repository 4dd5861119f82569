use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

/// What to do when a gradient contains NaN or infinity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    /// Fail with an error naming the parameter.
    #[default]
    Strict,
    /// Leave parameters and moments untouched for this step.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns `Ok(false)` when the step was
/// skipped under [`NanPolicy::Skip`].
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    policy: NanPolicy,
) -> Result<bool> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((name, p), g) in params.iter().zip(grads.tensors()) {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("gradient for `{name}` has shape {:?}, expected {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            match policy {
                NanPolicy::Strict => return Err(Error::NonFinite(format!("gradient of `{name}`"))),
                NanPolicy::Skip => return Ok(false),
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));

    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors()[i].data();
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(true)
}
