//! Longitudinal cohorts: subject/visit types, the synthetic generator, CSV
//! I/O, training-split normalization statistics, and the train/test split.

pub mod atlas;
mod generate;
mod io;
mod normalize;
mod spec;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::N_ROI;

pub use generate::generate_cohort;
pub use io::{load_cohort_csv, read_cohort_csv, write_cohort_csv, write_cohort_csv_to};
pub use normalize::{compute_normalization, NormalizationStats};
pub use spec::{CohortSpec, GroupCounts, GroupRates};
pub use split::split_cohort;

/// Scheduled visit months: bl, m06, m12, m24, m36.
pub const VISIT_MONTHS: [u32; 5] = [0, 6, 12, 24, 36];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::CN, Diagnosis::MCI, Diagnosis::AD];

    /// Position of the one-hot channel.
    pub fn index(self) -> usize {
        match self {
            Diagnosis::CN => 0,
            Diagnosis::MCI => 1,
            Diagnosis::AD => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::CN => "CN",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "CN" => Ok(Diagnosis::CN),
            "MCI" => Ok(Diagnosis::MCI),
            "AD" => Ok(Diagnosis::AD),
            other => Err(Error::invalid("dx", format!("`{other}` is not one of CN, MCI, AD"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub month: u32,
    pub dx: Diagnosis,
    /// Cortical thickness per ROI in mm.
    pub cth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// 0 = female, 1 = male.
    pub sex: u8,
    pub age_bl: f64,
    /// Sorted by month; month 0 is always first.
    pub visits: Vec<Visit>,
}

impl Subject {
    pub fn baseline(&self) -> &Visit {
        &self.visits[0]
    }

    pub fn visit(&self, month: u32) -> Option<&Visit> {
        self.visits.iter().find(|v| v.month == month)
    }

    pub fn is_complete(&self) -> bool {
        VISIT_MONTHS.iter().all(|&m| self.visit(m).is_some())
    }

    pub fn age_at(&self, month: u32) -> f64 {
        self.age_bl + month as f64 / 12.0
    }

    /// Checks the per-subject invariants: baseline present, months sorted and
    /// unique, 68 thickness values in (0, 6) mm.
    pub fn validate(&self) -> Result<(), Error> {
        if self.visits.first().map(|v| v.month) != Some(0) {
            return Err(Error::invalid(
                format!("subject {}", self.id),
                "baseline (month 0) visit missing; every participant needs complete baseline data",
            ));
        }
        if self.sex > 1 {
            return Err(Error::invalid(format!("subject {} sex", self.id), "must be 0 or 1"));
        }
        for w in self.visits.windows(2) {
            if w[0].month >= w[1].month {
                return Err(Error::invalid(
                    format!("subject {}", self.id),
                    format!("visit months not strictly increasing at month {}", w[1].month),
                ));
            }
        }
        for v in &self.visits {
            if v.cth.len() != N_ROI {
                return Err(Error::invalid(
                    format!("subject {} month {}", self.id, v.month),
                    format!("expected {N_ROI} ROI values, got {}", v.cth.len()),
                ));
            }
            if let Some(bad) = v.cth.iter().find(|&&x| !(x > 0.0 && x < 6.0)) {
                return Err(Error::invalid(
                    format!("subject {} month {}", self.id, v.month),
                    format!("thickness {bad} outside (0, 6) mm"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid("subject_id", format!("duplicate subject `{}`", s.id)));
            }
            s.validate()?;
        }
        Ok(())
    }
}
