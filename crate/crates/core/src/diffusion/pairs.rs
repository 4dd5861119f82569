use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, NormalizationStats, Subject, Visit};
use crate::denoiser::{encode_condition_into, ConditionRaw, COND_CHANNELS};
use crate::error::{Error, Result};
use crate::N_ROI;

/// Which visit pairs of a subject become training examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Every (earlier, later) pair of present visits.
    #[default]
    AllOrdered,
    /// Each visit paired with the next present visit.
    Consecutive,
    /// Baseline paired with every later visit.
    BaselineOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub subject_id: String,
    pub source_month: u32,
    pub target_month: u32,
    /// Normalized residual (target − source).
    pub x0: Vec<f64>,
    pub cond: ConditionRaw,
}

/// Condition for predicting from `visit` of `subject`, `delta` months ahead.
/// Age and diagnosis are taken at the conditioning visit.
pub fn condition_at(subject: &Subject, visit: &Visit, delta_months: f64) -> ConditionRaw {
    ConditionRaw {
        baseline_cth: visit.cth.clone(),
        age: subject.age_at(visit.month),
        sex: subject.sex,
        diagnosis: visit.dx,
        delta_months,
    }
}

pub fn build_training_pairs(
    cohort: &Cohort,
    policy: PairingPolicy,
    stats: &NormalizationStats,
) -> Vec<TrainingPair> {
    let mut out = Vec::new();
    for s in &cohort.subjects {
        let v = &s.visits;
        for i in 0..v.len() {
            if policy == PairingPolicy::BaselineOnly && i > 0 {
                break;
            }
            let targets = match policy {
                PairingPolicy::Consecutive => i + 1..(i + 2).min(v.len()),
                _ => i + 1..v.len(),
            };
            for j in targets {
                let (a, b) = (&v[i], &v[j]);
                let x0 = (0..N_ROI)
                    .map(|r| stats.normalize_residual(r, b.cth[r] - a.cth[r]))
                    .collect();
                out.push(TrainingPair {
                    subject_id: s.id.clone(),
                    source_month: a.month,
                    target_month: b.month,
                    x0,
                    cond: condition_at(s, a, (b.month - a.month) as f64),
                });
            }
        }
    }
    out
}

/// Flat training arrays: `x0` is `[N, 68]`, `cond` the encoded `[N, 7, 68]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSet {
    pub x0: Vec<f64>,
    pub cond: Vec<f32>,
}

impl TrainSet {
    pub fn from_pairs(pairs: &[TrainingPair], stats: &NormalizationStats) -> Result<Self> {
        let row = COND_CHANNELS * N_ROI;
        let mut set = TrainSet {
            x0: Vec::with_capacity(pairs.len() * N_ROI),
            cond: vec![0.0; pairs.len() * row],
        };
        for (i, p) in pairs.iter().enumerate() {
            if p.x0.len() != N_ROI {
                return Err(Error::dim("training pair", format!("x0 has {} values", p.x0.len())));
            }
            set.x0.extend_from_slice(&p.x0);
            encode_condition_into(&p.cond, stats, &mut set.cond[i * row..(i + 1) * row])?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x0.len() / N_ROI
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Population std of all target values pooled.
    pub fn sigma_data(&self) -> f64 {
        let n = self.x0.len() as f64;
        let m = self.x0.iter().sum::<f64>() / n;
        (self.x0.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
    }

    /// Copies rows `idx` into contiguous batch buffers.
    pub fn gather(&self, idx: &[usize], x0: &mut Vec<f64>, cond: &mut Vec<f32>) {
        let row = COND_CHANNELS * N_ROI;
        x0.clear();
        cond.clear();
        for &i in idx {
            x0.extend_from_slice(&self.x0[i * N_ROI..(i + 1) * N_ROI]);
            cond.extend_from_slice(&self.cond[i * row..(i + 1) * row]);
        }
    }
}
