use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::atlas;
use super::spec::CohortSpec;
use super::{Cohort, Diagnosis, Subject, Visit, VISIT_MONTHS};
use crate::error::Result;
use crate::rng;
use crate::N_ROI;

/// Fixed key of the atlas-level ROI profile so every cohort shares it.
const PROFILE_SEED: u64 = 0x0043_5448;

struct Latent {
    dx: Diagnosis,
    test: bool,
    sex: u8,
    age: f64,
    severity: f64,
    offset: f64,
    /// Ranking score used to choose test-split converters.
    conversion_score: f64,
}

/// Per-ROI template thickness (mm) and atrophy vulnerability multipliers.
pub fn roi_profile(spec: &CohortSpec) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::labeled(PROFILE_SEED, "roi-profile");
    let [lo, hi] = spec.template_range;
    let [vlo, vhi] = spec.vulnerability_range;
    let cut = vlo + (vhi - vlo) * 2.0 / 3.0;
    let mut template = Vec::with_capacity(N_ROI);
    let mut vuln = Vec::with_capacity(N_ROI);
    for roi in 0..N_ROI {
        template.push(lo + (hi - lo) * r.random::<f64>());
        let u: f64 = r.random();
        vuln.push(if atlas::is_temporal(roi) {
            cut + (vhi - cut) * u
        } else {
            vlo + (cut - vlo) * u
        });
    }
    (template, vuln)
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Draws a synthetic cohort. Test subjects (complete visits) come first in id
/// order, followed by training subjects whose follow-ups are thinned by the
/// missingness rates. Deterministic in `spec.seed`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let transitions = spec.transitions()?;
    let (template, vuln) = roi_profile(spec);
    let mut r = rng::labeled(spec.seed, "cohort");

    let mut plan = Vec::with_capacity(spec.n_subjects);
    for (counts, test) in [(spec.test_baseline, true), (spec.train_groups, false)] {
        for dx in Diagnosis::ALL {
            plan.extend(std::iter::repeat_n((dx, test), counts.get(dx)));
        }
    }

    let mut latents: Vec<Latent> = plan
        .into_iter()
        .map(|(dx, test)| {
            let sex = u8::from(r.random::<bool>());
            let age = (spec.age_mean + spec.age_std * normal(&mut r)).clamp(55.0, 90.0);
            let severity = normal(&mut r).clamp(-3.0, 3.0);
            let offset = spec.subject_offset_std * normal(&mut r);
            let conversion_score = severity + 0.5 * normal(&mut r);
            Latent {
                dx,
                test,
                sex,
                age,
                severity,
                offset,
                conversion_score,
            }
        })
        .collect();

    // Converters: the highest-scoring test subjects of the source group, each
    // assigned a conversion visit.
    let mut conversion: Vec<Option<(Diagnosis, u32)>> = vec![None; latents.len()];
    for (from, to, count) in [
        (Diagnosis::MCI, Diagnosis::AD, transitions.mci_to_ad),
        (Diagnosis::CN, Diagnosis::MCI, transitions.cn_to_mci),
    ] {
        let mut idx: Vec<usize> = (0..latents.len())
            .filter(|&i| latents[i].test && latents[i].dx == from)
            .collect();
        idx.sort_by(|&a, &b| {
            latents[b]
                .conversion_score
                .total_cmp(&latents[a].conversion_score)
                .then(a.cmp(&b))
        });
        for &i in idx.iter().take(count) {
            let month = VISIT_MONTHS[1 + r.random_range(0..VISIT_MONTHS.len() - 1)];
            conversion[i] = Some((to, month));
        }
    }

    let width = latents.len().to_string().len().max(4);
    let mut subjects = Vec::with_capacity(latents.len());
    for (i, lat) in latents.iter_mut().enumerate() {
        let rate = spec.annual_atrophy.get(lat.dx) * (spec.severity_rate_std * lat.severity).exp();
        let stage = spec.stage_thinning.get(lat.dx);
        let base: Vec<f64> = (0..N_ROI)
            .map(|roi| {
                template[roi]
                    * (1.0 + lat.offset)
                    * (1.0
                        - stage * vuln[roi]
                        - spec.severity_thinning * lat.severity * vuln[roi]
                        - spec.age_thinning * (lat.age - spec.age_mean))
            })
            .collect();

        let mut visits = Vec::with_capacity(VISIT_MONTHS.len());
        for (k, &month) in VISIT_MONTHS.iter().enumerate() {
            let dropped = if k == 0 {
                false
            } else {
                let u: f64 = r.random();
                !lat.test && u < spec.missingness[k - 1]
            };
            let years = month as f64 / 12.0;
            let cth: Vec<f64> = (0..N_ROI)
                .map(|roi| {
                    let truth = base[roi] * (1.0 - rate * vuln[roi]).powf(years);
                    let noise = if spec.noise_std > 0.0 {
                        spec.noise_std * normal(&mut r)
                    } else {
                        0.0
                    };
                    (truth + noise).clamp(0.05, 5.95)
                })
                .collect();
            if dropped {
                continue;
            }
            let dx = match conversion[i] {
                Some((to, at)) if month >= at => to,
                _ => lat.dx,
            };
            visits.push(Visit { month, dx, cth });
        }
        subjects.push(Subject {
            id: format!("S{:0width$}", i + 1),
            sex: lat.sex,
            age_bl: lat.age,
            visits,
        });
    }
    let cohort = Cohort { subjects };
    cohort.validate()?;
    Ok(cohort)
}
