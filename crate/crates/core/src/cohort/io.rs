use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::atlas::column_name;
use super::{Cohort, Diagnosis, Subject, Visit};
use crate::error::{Error, Result};
use crate::N_ROI;

const FIXED: [&str; 5] = ["subject_id", "visit_month", "sex", "age_bl", "dx"];

fn header() -> Vec<String> {
    FIXED
        .iter()
        .map(|s| s.to_string())
        .chain((0..N_ROI).map(column_name))
        .collect()
}

/// Writes one row per (subject, visit) in cohort order. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_cohort_csv_to<W: Write>(cohort: &Cohort, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(header())?;
    let mut row = Vec::with_capacity(FIXED.len() + N_ROI);
    for s in &cohort.subjects {
        for v in &s.visits {
            row.clear();
            row.push(s.id.clone());
            row.push(v.month.to_string());
            row.push(s.sex.to_string());
            row.push(s.age_bl.to_string());
            row.push(v.dx.to_string());
            row.extend(v.cth.iter().map(f64::to_string));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_cohort_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let f = std::io::BufWriter::new(File::create(path)?);
    write_cohort_csv_to(cohort, f)
}

pub fn load_cohort_csv(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let f = File::open(path)?;
    read_cohort_csv(f, &path.display().to_string())
}

/// Parses a cohort from CSV. `source` names the input in error messages.
/// Rows of one subject may appear anywhere; subjects keep first-seen order
/// and visits are sorted by month.
pub fn read_cohort_csv<R: Read>(r: R, source: &str) -> Result<Cohort> {
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: source.to_string(),
        line: line as usize,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let hdr = rdr.headers()?.clone();
    let mut cols = HashMap::new();
    for (i, name) in hdr.iter().enumerate() {
        if cols.insert(name.to_string(), i).is_some() {
            return Err(parse_err(1, format!("duplicate column `{name}`")));
        }
    }
    let want = header();
    let mut idx = Vec::with_capacity(want.len());
    for name in &want {
        match cols.get(name) {
            Some(&i) => idx.push(i),
            None => return Err(parse_err(1, format!("missing column `{name}`"))),
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, Subject> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            let s = field(k);
            s.parse::<f64>()
                .map_err(|_| parse_err(line, format!("column `{}`: `{s}` is not a number", want[k])))
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty subject_id".into()));
        }
        let month: u32 = field(1)
            .parse()
            .map_err(|_| parse_err(line, format!("visit_month `{}` is not a month offset", field(1))))?;
        let sex: u8 = match field(2) {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(line, format!("sex `{other}` must be 0 or 1"))),
        };
        let age_bl = num(3)?;
        let dx: Diagnosis = field(4).parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        let cth = (0..N_ROI).map(|r| num(FIXED.len() + r)).collect::<Result<Vec<_>>>()?;

        let subject = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Subject {
                id: id.clone(),
                sex,
                age_bl,
                visits: Vec::new(),
            }
        });
        if subject.sex != sex || subject.age_bl.to_bits() != age_bl.to_bits() {
            return Err(parse_err(
                line,
                format!("subject `{id}` has inconsistent sex/age_bl across rows"),
            ));
        }
        if subject.visits.iter().any(|v| v.month == month) {
            return Err(parse_err(line, format!("duplicate row for subject `{id}` month {month}")));
        }
        subject.visits.push(Visit { month, dx, cth });
    }

    let mut cohort = Cohort::default();
    for id in order {
        let mut s = subjects.remove(&id).expect("subject recorded in order");
        s.visits.sort_by_key(|v| v.month);
        cohort.subjects.push(s);
    }
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortSpec};

    fn roundtrip(c: &Cohort) -> Result<Cohort> {
        let mut buf = Vec::new();
        write_cohort_csv_to(c, &mut buf)?;
        read_cohort_csv(buf.as_slice(), "mem")
    }

    #[test]
    fn generated_cohort_roundtrips_exactly() {
        let c = generate_cohort(&CohortSpec::default()).unwrap();
        let back = roundtrip(&c).unwrap();
        assert_eq!(c, back);
        for (a, b) in c.subjects.iter().zip(&back.subjects) {
            for (va, vb) in a.visits.iter().zip(&b.visits) {
                assert!(va.cth.iter().zip(&vb.cth).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn output_is_lf_terminated_with_expected_header() {
        let c = generate_cohort(&CohortSpec::default()).unwrap();
        let mut buf = Vec::new();
        write_cohort_csv_to(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains('\r'));
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("subject_id,visit_month,sex,age_bl,dx,roi_001,"));
        assert!(first.ends_with(",roi_068"));
    }

    fn small_csv(drop_col: Option<&str>, rows: &[(&str, u32)]) -> String {
        let cols: Vec<String> = header().into_iter().filter(|c| Some(c.as_str()) != drop_col).collect();
        let mut s = cols.join(",") + "\n";
        for (id, m) in rows {
            let vals: Vec<String> = cols
                .iter()
                .map(|c| match c.as_str() {
                    "subject_id" => id.to_string(),
                    "visit_month" => m.to_string(),
                    "sex" => "1".into(),
                    "age_bl" => "70.5".into(),
                    "dx" => "MCI".into(),
                    _ => "2.5".into(),
                })
                .collect();
            s += &(vals.join(",") + "\n");
        }
        s
    }

    #[test]
    fn missing_column_is_named() {
        let text = small_csv(Some("roi_068"), &[("A", 0)]);
        let err = read_cohort_csv(text.as_bytes(), "x.csv").unwrap_err();
        assert!(err.to_string().contains("roi_068"), "{err}");
    }

    #[test]
    fn missing_baseline_is_rejected() {
        let text = small_csv(None, &[("A", 6)]);
        let err = read_cohort_csv(text.as_bytes(), "x.csv").unwrap_err();
        assert!(err.to_string().contains("complete baseline"), "{err}");
    }

    #[test]
    fn duplicate_visit_reports_line() {
        let text = small_csv(None, &[("A", 0), ("A", 6), ("A", 6)]);
        let err = read_cohort_csv(text.as_bytes(), "x.csv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_number_reports_line_and_column() {
        let text = small_csv(None, &[("A", 0)]).replacen(",2.5", ",abc", 1);
        let err = read_cohort_csv(text.as_bytes(), "x.csv").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("roi_001") && msg.contains('2'), "{msg}");
    }
}
