use super::spec::CohortSpec;
use super::{Cohort, Diagnosis};
use crate::error::{Error, Result};

/// Splits a cohort into (train, test). For each baseline diagnosis the test
/// split takes the first `spec.test_baseline` complete subjects in cohort
/// order; everyone else trains.
pub fn split_cohort(cohort: &Cohort, spec: &CohortSpec) -> Result<(Cohort, Cohort)> {
    if cohort.len() != spec.n_subjects {
        return Err(Error::invalid(
            "cohort",
            format!("has {} subjects, spec expects {}", cohort.len(), spec.n_subjects),
        ));
    }
    let mut remaining = [spec.test_baseline.cn, spec.test_baseline.mci, spec.test_baseline.ad];
    let mut train = Cohort::default();
    let mut test = Cohort::default();
    for s in &cohort.subjects {
        let g = s.baseline().dx.index();
        if remaining[g] > 0 && s.is_complete() {
            remaining[g] -= 1;
            test.subjects.push(s.clone());
        } else {
            train.subjects.push(s.clone());
        }
    }
    if let Some(g) = remaining.iter().position(|&r| r > 0) {
        return Err(Error::invalid(
            "test split",
            format!(
                "not enough complete {} subjects ({} short)",
                Diagnosis::ALL[g],
                remaining[g]
            ),
        ));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, VISIT_MONTHS};
    use std::collections::HashSet;

    #[test]
    fn default_split_sizes_and_completeness() {
        let spec = CohortSpec::default();
        let c = generate_cohort(&spec).unwrap();
        let (train, test) = split_cohort(&c, &spec).unwrap();
        assert_eq!((train.len(), test.len()), (720, 178));
        let a: HashSet<_> = train.subjects.iter().map(|s| &s.id).collect();
        assert!(test.subjects.iter().all(|s| !a.contains(&s.id)));
        assert!(test.subjects.iter().all(|s| s.visits.len() == VISIT_MONTHS.len()));
        let mut bl = [0; 3];
        for s in &train.subjects {
            bl[s.baseline().dx.index()] += 1;
        }
        assert_eq!(bl, [209, 324, 187]);
    }

    #[test]
    fn too_few_complete_subjects_is_an_error() {
        let spec = CohortSpec::default();
        let mut c = generate_cohort(&spec).unwrap();
        for s in c.subjects.iter_mut() {
            s.visits.truncate(2);
        }
        assert!(split_cohort(&c, &spec).is_err());
    }
}
