use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{
    bland_altman, linear_fit, mae_by_group, match_truth, pooled, uncertainty_summary, AgreementReport, Group,
    GroupStat, LinearFit, Matched, PointEstimate, PredictionSet, UncertaintyRow,
};
use crate::cohort::Cohort;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonthStats {
    pub month: u32,
    pub groups: Vec<GroupStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaeSection {
    pub overall: Vec<GroupStat>,
    pub by_month: Vec<MonthStats>,
}

/// `month` is `None` for the pool over all evaluated months.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupAgreement {
    pub group: Group,
    pub month: Option<u32>,
    #[serde(flatten)]
    pub report: AgreementReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupFit {
    pub group: Group,
    pub month: Option<u32>,
    #[serde(flatten)]
    pub fit: LinearFit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyOverview {
    pub k: usize,
    pub mean_std: f64,
    pub mean_interval_width: f64,
}

/// Everything `evaluate` reports. The schema does not depend on the model
/// kind; `uncertainty` is null for single-realization predictions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_predictions: usize,
    pub k: usize,
    pub point_estimate: PointEstimate,
    pub months: Vec<u32>,
    pub mae_table: MaeSection,
    /// MAE of the zero-change reference on the same (subject, month) keys.
    pub carry_forward_mae: MaeSection,
    pub bland_altman: Vec<GroupAgreement>,
    pub linear_fit: Vec<GroupFit>,
    pub uncertainty: Option<UncertaintyOverview>,
}

fn mae_section(matched: &[Matched], months: &[u32]) -> MaeSection {
    MaeSection {
        overall: mae_by_group(matched),
        by_month: months
            .iter()
            .map(|&month| {
                let rows: Vec<Matched> = matched.iter().filter(|m| m.month == month).cloned().collect();
                MonthStats {
                    month,
                    groups: mae_by_group(&rows),
                }
            })
            .collect(),
    }
}

fn slices(months: &[u32]) -> Vec<Option<u32>> {
    std::iter::once(None).chain(months.iter().copied().map(Some)).collect()
}

/// Computes the report plus the per-ROI uncertainty rows (empty when K = 1).
pub fn build_report(
    set: &PredictionSet,
    truth: &Cohort,
    est: PointEstimate,
) -> Result<(MetricsReport, Vec<Matched>, Vec<UncertaintyRow>)> {
    let matched = match_truth(set, truth, est)?;
    let months = set.months();
    let carry: Vec<Matched> = matched
        .iter()
        .map(|m| Matched {
            pred: m.baseline.clone(),
            ..m.clone()
        })
        .collect();

    let mut agreement = Vec::new();
    let mut fits = Vec::new();
    for month in slices(&months) {
        for g in Group::ORDER {
            let (p, t) = pooled(&matched, g, month);
            if let Ok(report) = bland_altman(&p, &t) {
                agreement.push(GroupAgreement { group: g, month, report });
            }
            if let Ok(fit) = linear_fit(&p, &t) {
                fits.push(GroupFit { group: g, month, fit });
            }
        }
    }

    let (rows, uncertainty) = if set.k() >= 2 {
        let rows = uncertainty_summary(set)?;
        let n = rows.len() as f64;
        let overview = UncertaintyOverview {
            k: set.k(),
            mean_std: rows.iter().map(|r| r.std).sum::<f64>() / n,
            mean_interval_width: rows.iter().map(|r| r.hi95 - r.lo95).sum::<f64>() / n,
        };
        (rows, Some(overview))
    } else {
        (Vec::new(), None)
    };

    let report = MetricsReport {
        n_predictions: set.len(),
        k: set.k(),
        point_estimate: est,
        mae_table: mae_section(&matched, &months),
        carry_forward_mae: mae_section(&carry, &months),
        months,
        bland_altman: agreement,
        linear_fit: fits,
        uncertainty,
    };
    Ok((report, matched, rows))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?)))
}

/// Writes `report_path` (JSON) and the plot-ready CSVs next to it:
/// `ba_points.csv`, `fit_points.csv`, and one `trajectory_<subject>.csv` per
/// subject when realizations are available.
pub fn write_artifacts(
    report: &MetricsReport,
    matched: &[Matched],
    uncertainty: &[UncertaintyRow],
    report_path: &Path,
) -> Result<()> {
    let dir = report_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut f = BufWriter::new(File::create(report_path)?);
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    f.flush()?;

    let mut ba = csv_writer(&dir.join("ba_points.csv"))?;
    let mut fit = csv_writer(&dir.join("fit_points.csv"))?;
    ba.write_record(["subject_id", "month", "dx", "roi", "mean", "difference"])?;
    fit.write_record(["subject_id", "month", "dx", "roi", "truth", "pred"])?;
    for m in matched {
        for (roi, (&p, &t)) in m.pred.iter().zip(&m.truth).enumerate() {
            let head = [m.subject_id.clone(), m.month.to_string(), m.dx.to_string(), (roi + 1).to_string()];
            ba.write_record(head.iter().cloned().chain([((p + t) / 2.0).to_string(), (p - t).to_string()]))?;
            fit.write_record(head.into_iter().chain([t.to_string(), p.to_string()]))?;
        }
    }
    ba.flush()?;
    fit.flush()?;

    let mut by_subject: BTreeMap<&str, Vec<&UncertaintyRow>> = BTreeMap::new();
    for r in uncertainty {
        by_subject.entry(r.subject_id.as_str()).or_default().push(r);
    }
    for (id, rows) in by_subject {
        let mut w = csv_writer(&dir.join(format!("trajectory_{id}.csv")))?;
        w.write_record(["month", "roi", "mean", "lo95", "hi95"])?;
        for r in rows {
            w.write_record([
                r.month.to_string(),
                (r.roi + 1).to_string(),
                r.mean.to_string(),
                r.lo95.to_string(),
                r.hi95.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
