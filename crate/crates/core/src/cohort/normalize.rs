use serde::{Deserialize, Serialize};

use super::Cohort;
use crate::error::{Error, Result};
use crate::N_ROI;

/// Training-split statistics used to z-score thickness levels, visit-to-visit
/// residuals and age. All standard deviations are population (1/n) values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub level_mean: Vec<f64>,
    pub level_std: Vec<f64>,
    pub resid_mean: Vec<f64>,
    pub resid_std: Vec<f64>,
    pub age_mean: f64,
    pub age_std: f64,
}

fn mean_std(rows: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = rows.clone().count() as f64;
    let mean = rows.clone().sum::<f64>() / n;
    let var = rows.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormalizationStats {
    /// Identity transform (zero means, unit stds), handy for synthetic tasks
    /// that are already on a unit scale.
    pub fn identity() -> Self {
        Self {
            level_mean: vec![0.0; N_ROI],
            level_std: vec![1.0; N_ROI],
            resid_mean: vec![0.0; N_ROI],
            resid_std: vec![1.0; N_ROI],
            age_mean: 0.0,
            age_std: 1.0,
        }
    }

    pub fn normalize_level(&self, roi: usize, v: f64) -> f64 {
        (v - self.level_mean[roi]) / self.level_std[roi]
    }

    pub fn normalize_residual(&self, roi: usize, d: f64) -> f64 {
        (d - self.resid_mean[roi]) / self.resid_std[roi]
    }

    pub fn denormalize_residual(&self, roi: usize, z: f64) -> f64 {
        z * self.resid_std[roi] + self.resid_mean[roi]
    }

    pub fn normalize_age(&self, age: f64) -> f64 {
        (age - self.age_mean) / self.age_std
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("level_mean", &self.level_mean),
            ("level_std", &self.level_std),
            ("resid_mean", &self.resid_mean),
            ("resid_std", &self.resid_std),
        ] {
            if v.len() != N_ROI {
                return Err(Error::invalid(
                    format!("normalization.{name}"),
                    format!("expected {N_ROI} entries, got {}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("normalization.{name}"), "non-finite entry"));
            }
        }
        let stds = self.level_std.iter().chain(&self.resid_std).chain([&self.age_std]);
        if stds.into_iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("normalization", "standard deviations must be > 0"));
        }
        Ok(())
    }
}

/// Statistics over the given (training) subjects only: levels over every
/// visit, residuals over every ordered visit pair, age over baseline ages.
pub fn compute_normalization(train: &Cohort) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::invalid("train split", "no subjects"));
    }
    let visits = || train.subjects.iter().flat_map(|s| s.visits.iter());
    let pairs = || {
        train.subjects.iter().flat_map(|s| {
            s.visits.iter().enumerate().flat_map(move |(i, a)| s.visits[i + 1..].iter().map(move |b| (a, b)))
        })
    };
    if pairs().next().is_none() {
        return Err(Error::invalid("train split", "no subject has two visits"));
    }

    let mut st = NormalizationStats {
        level_mean: Vec::with_capacity(N_ROI),
        level_std: Vec::with_capacity(N_ROI),
        resid_mean: Vec::with_capacity(N_ROI),
        resid_std: Vec::with_capacity(N_ROI),
        age_mean: 0.0,
        age_std: 0.0,
    };
    for roi in 0..N_ROI {
        let (m, s) = mean_std(visits().map(|v| v.cth[roi]));
        st.level_mean.push(m);
        st.level_std.push(s);
        let (m, s) = mean_std(pairs().map(|(a, b)| b.cth[roi] - a.cth[roi]));
        st.resid_mean.push(m);
        st.resid_std.push(s);
    }
    (st.age_mean, st.age_std) = mean_std(train.subjects.iter().map(|s| s.age_bl));

    for roi in 0..N_ROI {
        if st.level_std[roi] <= 0.0 || st.resid_std[roi] <= 0.0 {
            return Err(Error::invalid(
                format!("ROI {}", roi + 1),
                "zero variance in the training split",
            ));
        }
    }
    if st.age_std <= 0.0 {
        return Err(Error::invalid("age_bl", "zero variance in the training split"));
    }
    Ok(st)
}
