use serde::{Deserialize, Serialize};

use super::Diagnosis;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCounts {
    pub cn: usize,
    pub mci: usize,
    pub ad: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.cn + self.mci + self.ad
    }

    pub fn get(&self, dx: Diagnosis) -> usize {
        match dx {
            Diagnosis::CN => self.cn,
            Diagnosis::MCI => self.mci,
            Diagnosis::AD => self.ad,
        }
    }
}

/// Per-group value (annual atrophy fraction, baseline stage thinning).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRates {
    pub cn: f64,
    pub mci: f64,
    pub ad: f64,
}

impl GroupRates {
    pub fn get(&self, dx: Diagnosis) -> f64 {
        match dx {
            Diagnosis::CN => self.cn,
            Diagnosis::MCI => self.mci,
            Diagnosis::AD => self.ad,
        }
    }
}

/// Parameters of the synthetic cohort. Defaults mirror the enrolled cohort's
/// structure (898 subjects, 720/178 split, group compositions); the
/// generative parameters are plausibility defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Baseline diagnosis counts of the training split.
    pub train_groups: GroupCounts,
    /// Baseline diagnosis counts of the test split.
    pub test_baseline: GroupCounts,
    /// Diagnosis counts of the test split at month 36.
    pub test_m36: GroupCounts,
    /// Annual fractional thinning per baseline group.
    pub annual_atrophy: GroupRates,
    /// Relative baseline thinning per group, scaled by ROI vulnerability.
    pub stage_thinning: GroupRates,
    /// Range of per-ROI template thickness means (mm).
    pub template_range: [f64; 2],
    /// Range of per-ROI vulnerability multipliers; temporal-lobe ROIs take
    /// the upper third.
    pub vulnerability_range: [f64; 2],
    /// Std of the subject-level log atrophy-rate multiplier.
    pub severity_rate_std: f64,
    /// Relative baseline thinning per unit of subject severity.
    pub severity_thinning: f64,
    /// Std of the subject-level global thickness offset (relative).
    pub subject_offset_std: f64,
    /// Relative thinning per year of age above the cohort mean age.
    pub age_thinning: f64,
    pub age_mean: f64,
    pub age_std: f64,
    /// Measurement noise std (mm), applied independently per ROI and visit.
    pub noise_std: f64,
    /// Probability that each follow-up visit (m06, m12, m24, m36) of a
    /// training subject is missing.
    pub missingness: [f64; 4],
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 898,
            n_train: 720,
            n_test: 178,
            train_groups: GroupCounts {
                cn: 209,
                mci: 324,
                ad: 187,
            },
            test_baseline: GroupCounts {
                cn: 78,
                mci: 100,
                ad: 0,
            },
            test_m36: GroupCounts {
                cn: 70,
                mci: 68,
                ad: 40,
            },
            annual_atrophy: GroupRates {
                cn: 0.005,
                mci: 0.015,
                ad: 0.030,
            },
            stage_thinning: GroupRates {
                cn: 0.0,
                mci: 0.03,
                ad: 0.07,
            },
            template_range: [2.0, 3.5],
            vulnerability_range: [0.5, 2.0],
            severity_rate_std: 0.4,
            severity_thinning: 0.03,
            subject_offset_std: 0.04,
            age_thinning: 0.002,
            age_mean: 73.0,
            age_std: 7.0,
            noise_std: 0.05,
            missingness: [0.10, 0.15, 0.25, 0.35],
            seed: 2024,
        }
    }
}

/// Diagnosis transitions needed to move the test split from its baseline
/// composition to the month-36 target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Transitions {
    pub cn_to_mci: usize,
    pub mci_to_ad: usize,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test != self.n_subjects {
            return Err(Error::invalid(
                "n_subjects",
                format!("{} train + {} test != {}", self.n_train, self.n_test, self.n_subjects),
            ));
        }
        if self.train_groups.total() != self.n_train {
            return Err(Error::invalid(
                "train_groups",
                format!("sum {} != n_train {}", self.train_groups.total(), self.n_train),
            ));
        }
        if self.test_baseline.total() != self.n_test {
            return Err(Error::invalid(
                "test_baseline",
                format!("sum {} != n_test {}", self.test_baseline.total(), self.n_test),
            ));
        }
        if self.test_m36.total() != self.n_test {
            return Err(Error::invalid(
                "test_m36",
                format!("sum {} != n_test {}", self.test_m36.total(), self.n_test),
            ));
        }
        self.transitions()?;
        for (name, r) in [
            ("annual_atrophy", self.annual_atrophy),
            ("stage_thinning", self.stage_thinning),
        ] {
            for dx in Diagnosis::ALL {
                let v = r.get(dx);
                if !(0.0..0.5).contains(&v) {
                    return Err(Error::invalid(format!("{name}.{dx}"), "must lie in [0, 0.5)"));
                }
            }
        }
        let [lo, hi] = self.template_range;
        if !(lo > 0.0 && lo <= hi && hi < 6.0) {
            return Err(Error::invalid("template_range", "must satisfy 0 < lo <= hi < 6"));
        }
        let [vlo, vhi] = self.vulnerability_range;
        if !(vlo >= 0.0 && vlo <= vhi) {
            return Err(Error::invalid("vulnerability_range", "must satisfy 0 <= lo <= hi"));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("severity_rate_std", self.severity_rate_std),
            ("severity_thinning", self.severity_thinning),
            ("subject_offset_std", self.subject_offset_std),
            ("age_std", self.age_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        if let Some(p) = self.missingness.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::invalid("missingness", format!("rate {p} outside [0, 1)")));
        }
        Ok(())
    }

    /// Reconciles the baseline and month-36 test compositions. Only
    /// CN→MCI and MCI→AD moves are allowed; infeasible targets are rejected.
    pub(crate) fn transitions(&self) -> Result<Transitions> {
        let (b, t) = (self.test_baseline, self.test_m36);
        let infeasible = |why: String| Err(Error::invalid("test_m36", why));
        if t.cn > b.cn {
            return infeasible(format!("CN cannot grow from {} to {}", b.cn, t.cn));
        }
        let cn_to_mci = b.cn - t.cn;
        if t.ad < b.ad {
            return infeasible(format!("AD cannot shrink from {} to {}", b.ad, t.ad));
        }
        let mci_to_ad = t.ad - b.ad;
        if mci_to_ad > b.mci {
            return infeasible(format!("{mci_to_ad} MCI→AD conversions exceed {} baseline MCI", b.mci));
        }
        Ok(Transitions { cn_to_mci, mci_to_ad })
    }
}
