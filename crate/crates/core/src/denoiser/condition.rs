use crate::autodiff::Tensor;
use crate::cohort::{Diagnosis, NormalizationStats};
use crate::error::{Error, Result};
use crate::N_ROI;

/// Channels of an encoded condition.
pub const COND_CHANNELS: usize = 7;

/// Months that map to 1.0 on the interval channel.
pub const DELTA_SCALE_MONTHS: f64 = 36.0;

/// Conditioning information for one prediction: the thickness and clinical
/// state at the conditioning visit plus the interval to the target.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionRaw {
    pub baseline_cth: Vec<f64>,
    /// Age in years at the conditioning visit.
    pub age: f64,
    pub sex: u8,
    pub diagnosis: Diagnosis,
    pub delta_months: f64,
}

impl ConditionRaw {
    pub fn validate(&self) -> Result<()> {
        if self.baseline_cth.len() != N_ROI {
            return Err(Error::invalid(
                "baseline_cth",
                format!("expected {N_ROI} values, got {}", self.baseline_cth.len()),
            ));
        }
        if let Some(v) = self.baseline_cth.iter().find(|&&v| !(v > 0.0 && v < 6.0)) {
            return Err(Error::invalid("baseline_cth", format!("{v} outside (0, 6) mm")));
        }
        if !(40.0..=100.0).contains(&self.age) {
            return Err(Error::invalid("age", format!("{} outside [40, 100]", self.age)));
        }
        if self.sex > 1 {
            return Err(Error::invalid("sex", "must be 0 or 1"));
        }
        if !(self.delta_months > 0.0 && self.delta_months <= 120.0) {
            return Err(Error::invalid(
                "delta_months",
                format!("{} outside (0, 120]", self.delta_months),
            ));
        }
        Ok(())
    }
}

/// Writes the `[7, 68]` channel layout into `out`:
/// 0 normalized thickness, 1 normalized age, 2 sex, 3..=5 diagnosis one-hot,
/// 6 interval in units of 36 months.
pub fn encode_condition_into(raw: &ConditionRaw, stats: &NormalizationStats, out: &mut [f32]) -> Result<()> {
    raw.validate()?;
    if out.len() != COND_CHANNELS * N_ROI {
        return Err(Error::dim(
            "encode_condition",
            format!("output buffer has {} values, expected {}", out.len(), COND_CHANNELS * N_ROI),
        ));
    }
    let (thick, rest) = out.split_at_mut(N_ROI);
    for (roi, o) in thick.iter_mut().enumerate() {
        *o = stats.normalize_level(roi, raw.baseline_cth[roi]) as f32;
    }
    let mut onehot = [0.0f32; 3];
    onehot[raw.diagnosis.index()] = 1.0;
    let fill = [
        stats.normalize_age(raw.age) as f32,
        f32::from(raw.sex),
        onehot[0],
        onehot[1],
        onehot[2],
        (raw.delta_months / DELTA_SCALE_MONTHS) as f32,
    ];
    for (ch, v) in fill.into_iter().enumerate() {
        rest[ch * N_ROI..(ch + 1) * N_ROI].fill(v);
    }
    Ok(())
}

pub fn encode_condition(raw: &ConditionRaw, stats: &NormalizationStats) -> Result<Tensor<f32>> {
    let mut data = vec![0.0; COND_CHANNELS * N_ROI];
    encode_condition_into(raw, stats, &mut data)?;
    Tensor::new(vec![COND_CHANNELS, N_ROI], data)
}

/// Normalized fields read back from an encoded condition.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedCondition {
    pub baseline_z: Vec<f32>,
    pub age_z: f32,
    pub sex: f32,
    pub diagnosis: Diagnosis,
    pub delta: f32,
}

pub fn decode_condition(t: &Tensor<f32>) -> Result<DecodedCondition> {
    if t.shape() != [COND_CHANNELS, N_ROI] {
        return Err(Error::dim("decode_condition", format!("shape {:?}", t.shape())));
    }
    let ch = |c: usize| &t.data()[c * N_ROI..(c + 1) * N_ROI];
    let constant = |c: usize| -> Result<f32> {
        let row = ch(c);
        if row.iter().any(|&v| v.to_bits() != row[0].to_bits()) {
            return Err(Error::invalid(format!("condition channel {c}"), "not constant along length"));
        }
        Ok(row[0])
    };
    let hot: Vec<usize> = (0..3).filter(|&k| ch(3 + k).iter().all(|&v| v == 1.0)).collect();
    let cold = (0..3).filter(|&k| ch(3 + k).iter().all(|&v| v == 0.0)).count();
    if hot.len() != 1 || cold != 2 {
        return Err(Error::invalid("condition channels 3..=5", "not a one-hot diagnosis"));
    }
    Ok(DecodedCondition {
        baseline_z: ch(0).to_vec(),
        age_z: constant(1)?,
        sex: constant(2)?,
        diagnosis: Diagnosis::ALL[hot[0]],
        delta: constant(6)?,
    })
}
