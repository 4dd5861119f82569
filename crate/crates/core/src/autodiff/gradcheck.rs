//! Central finite-difference gradient checking in 64-bit.
//!
//! The checker rebuilds the whole computation for every perturbed input
//! element and shares no code with the reverse sweep beyond forward ops.

use super::tape::{Tape, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max|analytic − numeric| / max|numeric|` for each input tensor.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Normwise relative error `‖a − n‖∞ / ‖n‖∞`; both zero counts as exact.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `eps` for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out, &Tensor::scalar(1.0))?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * eps);
        }
        rel_errors.push(rel_error(&analytic, &numeric));
    }
    Ok(GradCheckReport { rel_errors })
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::dim("gradcheck", format!("objective must be scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Normwise error of `analytic` against central differences of `loss` over
/// every element of every tensor in `params`, taken over the concatenation
/// of all gradients.
pub fn check_params<F>(params: &ParamStore<f64>, analytic: &ParamStore<f64>, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let mut probe = params.clone();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (ti, name) in params.names().iter().enumerate() {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::dim("gradcheck", format!("no analytic gradient for `{name}`")))?;
        if a.shape() != params.tensors()[ti].shape() {
            return Err(Error::dim("gradcheck", format!("gradient shape of `{name}`")));
        }
        for j in 0..a.len() {
            let orig = params.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            all_n.push((up - down) / (2.0 * eps));
        }
        all_a.extend_from_slice(a.data());
    }
    Ok(rel_error(&all_a, &all_n))
}
