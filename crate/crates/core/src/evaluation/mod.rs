//! Prediction metrics: MAE by diagnostic group, Bland-Altman agreement,
//! least-squares fit of predicted on true thickness, and realization
//! spread. All reductions run in a fixed order so results are
//! bit-reproducible.

mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Diagnosis};
use crate::diffusion::Prediction;
use crate::error::{Error, Result};
use crate::N_ROI;

pub use report::{build_report, write_artifacts, GroupAgreement, GroupFit, MetricsReport, UncertaintyOverview};

/// How `K > 1` realizations reduce to one predicted vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEstimate {
    #[default]
    Mean,
    Median,
}

/// Predictions keyed by (subject, month) with `K` realizations each.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    entries: BTreeMap<(String, u32), Vec<Vec<f64>>>,
    k: usize,
}

impl PredictionSet {
    /// Groups flat prediction rows. Every key must carry realizations
    /// `0..K` exactly once, with the same `K` throughout.
    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::invalid("predictions", "empty prediction set"));
        }
        let mut slots: BTreeMap<(String, u32), Vec<Option<Vec<f64>>>> = BTreeMap::new();
        for p in preds {
            if p.cth.len() != N_ROI {
                return Err(Error::dim("predictions", format!("{} values for {}", p.cth.len(), p.subject_id)));
            }
            let v = slots.entry((p.subject_id.clone(), p.target_month)).or_default();
            if v.len() <= p.realization {
                v.resize(p.realization + 1, None);
            }
            if v[p.realization].replace(p.cth.clone()).is_some() {
                return Err(Error::invalid(
                    "predictions",
                    format!(
                        "duplicate realization {} for {} month {}",
                        p.realization, p.subject_id, p.target_month
                    ),
                ));
            }
        }
        let k = slots.values().next().map_or(0, Vec::len);
        let mut entries = BTreeMap::new();
        for (key, v) in slots {
            if v.len() != k || v.iter().any(Option::is_none) {
                return Err(Error::invalid(
                    "predictions",
                    format!("{} month {} does not have realizations 0..{k}", key.0, key.1),
                ));
            }
            entries.insert(key, v.into_iter().map(Option::unwrap).collect());
        }
        Ok(Self { entries, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn months(&self) -> Vec<u32> {
        let mut m: Vec<u32> = self.entries.keys().map(|k| k.1).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, u32), &Vec<Vec<f64>>)> {
        self.entries.iter()
    }
}

/// Reduces realizations ROI by ROI.
pub fn point_estimate(real: &[Vec<f64>], est: PointEstimate) -> Vec<f64> {
    let k = real.len() as f64;
    (0..N_ROI)
        .map(|r| match est {
            PointEstimate::Mean => real.iter().map(|v| v[r]).sum::<f64>() / k,
            PointEstimate::Median => {
                let mut col: Vec<f64> = real.iter().map(|v| v[r]).collect();
                col.sort_by(f64::total_cmp);
                percentile_sorted(&col, 0.5)
            }
        })
        .collect()
}

/// Linear interpolation between order statistics at position `p·(K − 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One evaluated (subject, month) with its point prediction and the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Matched {
    pub subject_id: String,
    pub month: u32,
    /// Diagnosis at the evaluated visit.
    pub dx: Diagnosis,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    /// Baseline thickness of the subject.
    pub baseline: Vec<f64>,
}

/// Pairs every prediction with its ground-truth visit.
pub fn match_truth(set: &PredictionSet, truth: &Cohort, est: PointEstimate) -> Result<Vec<Matched>> {
    let index: HashMap<&str, usize> = truth.subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(set.len());
    for ((id, month), real) in set.iter() {
        let s = index
            .get(id.as_str())
            .map(|&i| &truth.subjects[i])
            .ok_or_else(|| Error::invalid("predictions", format!("subject `{id}` is not in the truth cohort")))?;
        let v = s
            .visit(*month)
            .ok_or_else(|| Error::invalid("predictions", format!("subject `{id}` has no visit at month {month}")))?;
        out.push(Matched {
            subject_id: id.clone(),
            month: *month,
            dx: v.dx,
            pred: point_estimate(real, est),
            truth: v.cth.clone(),
            baseline: s.baseline().cth.clone(),
        });
    }
    Ok(out)
}

/// Reporting groups, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    All,
    CN,
    MCI,
    AD,
}

impl Group {
    pub const ORDER: [Group; 4] = [Group::All, Group::CN, Group::MCI, Group::AD];

    pub fn contains(self, dx: Diagnosis) -> bool {
        match self {
            Group::All => true,
            Group::CN => dx == Diagnosis::CN,
            Group::MCI => dx == Diagnosis::MCI,
            Group::AD => dx == Diagnosis::AD,
        }
    }
}

/// Mean ± sample SD over subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: Group,
    pub n_subjects: usize,
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Per subject, the mean of `|pred − truth|` over ROIs and the visits that
/// fall in each group; then mean ± SD over subjects. Groups without any
/// visit are omitted.
pub fn mae_by_group(matched: &[Matched]) -> Vec<GroupStat> {
    let mut out = Vec::new();
    for g in Group::ORDER {
        let mut per_subject: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for m in matched.iter().filter(|m| g.contains(m.dx)) {
            let e = per_subject.entry(m.subject_id.as_str()).or_insert((0.0, 0));
            e.0 += m.pred.iter().zip(&m.truth).map(|(p, t)| (p - t).abs()).sum::<f64>();
            e.1 += m.pred.len();
        }
        if per_subject.is_empty() {
            continue;
        }
        let maes: Vec<f64> = per_subject.values().map(|(s, n)| s / *n as f64).collect();
        let (mean, sd) = mean_sd(&maes);
        out.push(GroupStat {
            group: g,
            n_subjects: maes.len(),
            mean,
            sd,
        });
    }
    out
}

/// Looks up one group's entry.
pub fn group_stat(table: &[GroupStat], g: Group) -> Option<&GroupStat> {
    table.iter().find(|s| s.group == g)
}

/// Mean difference and limits of agreement of paired values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub md: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Differences are `pred − truth`; limits are `MD ± 1.96·SD` with the sample
/// SD.
pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<AgreementReport> {
    if pred.len() != truth.len() {
        return Err(Error::dim("bland_altman", format!("{} vs {} values", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("bland_altman", "needs at least 2 paired points"));
    }
    let d: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let (md, sd) = mean_sd(&d);
    Ok(AgreementReport {
        n: d.len(),
        md,
        sd,
        lower: md - 1.96 * sd,
        upper: md + 1.96 * sd,
    })
}

/// Ordinary least squares of `pred` on `truth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(pred: &[f64], truth: &[f64]) -> Result<LinearFit> {
    if pred.len() != truth.len() {
        return Err(Error::dim("linear_fit", format!("{} vs {} values", pred.len(), truth.len())));
    }
    if pred.len() < 3 {
        return Err(Error::invalid("linear_fit", "needs at least 3 points"));
    }
    let n = pred.len() as f64;
    let mt = truth.iter().sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let (mut stt, mut spp, mut stp) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        stt += (t - mt) * (t - mt);
        spp += (p - mp) * (p - mp);
        stp += (t - mt) * (p - mp);
    }
    if stt == 0.0 {
        return Err(Error::invalid("linear_fit", "truth has zero variance"));
    }
    let slope = stp / stt;
    let r_squared = if spp == 0.0 { 1.0 } else { stp * stp / (stt * spp) };
    Ok(LinearFit {
        n: pred.len(),
        slope,
        intercept: mp - slope * mt,
        r_squared,
    })
}

/// Pooled (pred, truth) values over every ROI of the matched rows in `g`,
/// optionally restricted to one month.
pub fn pooled(matched: &[Matched], g: Group, month: Option<u32>) -> (Vec<f64>, Vec<f64>) {
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for m in matched
        .iter()
        .filter(|m| g.contains(m.dx) && month.is_none_or(|mo| mo == m.month))
    {
        p.extend_from_slice(&m.pred);
        t.extend_from_slice(&m.truth);
    }
    (p, t)
}

/// Realization spread of one (subject, month, ROI).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyRow {
    pub subject_id: String,
    pub month: u32,
    pub roi: usize,
    pub mean: f64,
    pub std: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Sample mean and SD over realizations with a central 95% interval:
/// empirical 2.5/97.5 percentiles when `K ≥ 40`, `mean ± 1.96·SD` below.
pub fn uncertainty_summary(set: &PredictionSet) -> Result<Vec<UncertaintyRow>> {
    if set.k() < 2 {
        return Err(Error::invalid(
            "realizations",
            "uncertainty needs K >= 2; evaluate K = 1 predictions as deterministic",
        ));
    }
    let mut out = Vec::with_capacity(set.len() * N_ROI);
    for ((id, month), real) in set.iter() {
        for roi in 0..N_ROI {
            let mut col: Vec<f64> = real.iter().map(|v| v[roi]).collect();
            let (mean, std) = mean_sd(&col);
            let (lo95, hi95) = if col.len() >= 40 {
                col.sort_by(f64::total_cmp);
                (percentile_sorted(&col, 0.025), percentile_sorted(&col, 0.975))
            } else {
                (mean - 1.96 * std, mean + 1.96 * std)
            };
            out.push(UncertaintyRow {
                subject_id: id.clone(),
                month: *month,
                roi,
                mean,
                std,
                lo95,
                hi95,
            });
        }
    }
    Ok(out)
}
