use serde::Serialize;

use super::{initial_noise, run, sigma_schedule};
use crate::cohort::Subject;
use crate::denoiser::{encode_condition_into, ConditionRaw, Model, ModelKind, COND_CHANNELS};
use crate::error::{Error, Result};
use crate::rng;
use crate::N_ROI;

/// Rows pushed through the network together during sampling.
const CHUNK: usize = 32;

/// One predicted thickness vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub subject_id: String,
    pub target_month: u32,
    pub realization: usize,
    /// Predicted thickness in mm.
    pub cth: Vec<f64>,
}

/// Options shared by all prediction entry points.
#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub months: Vec<u32>,
    /// Realizations per month; forced to 1 for deterministic models.
    pub realizations: usize,
    pub seed: u64,
    /// Sampler intervals; `None` uses the checkpoint's NFE budget.
    pub steps: Option<usize>,
    pub threads: usize,
}

impl PredictOptions {
    pub fn validate(&self) -> Result<()> {
        if self.months.is_empty() {
            return Err(Error::invalid("months", "at least one target month required"));
        }
        if let Some(m) = self.months.iter().find(|&&m| m == 0 || m > 120) {
            return Err(Error::invalid("months", format!("{m} must lie in (0, 120]")));
        }
        if self.realizations == 0 {
            return Err(Error::invalid("realizations", "must be >= 1"));
        }
        if self.steps == Some(0) {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        Ok(())
    }
}

struct Task<'a> {
    id: &'a str,
    base: &'a ConditionRaw,
    month: u32,
    realization: usize,
}

/// Sample substream of one (subject, month, realization) task. Keyed by
/// content so results do not depend on which other tasks run alongside.
fn task_rng(seed: u64, t: &Task<'_>) -> rng::Rng {
    rng::labeled(seed, &format!("sample/{}/{}/{}", t.id, t.month, t.realization))
}

fn run_chunk(model: &Model, tasks: &[Task<'_>], opts: &PredictOptions) -> Result<Vec<Vec<f64>>> {
    let row = COND_CHANNELS * N_ROI;
    let stats = model.stats();
    let mut cond = vec![0.0f32; tasks.len() * row];
    for (i, t) in tasks.iter().enumerate() {
        let raw = ConditionRaw {
            delta_months: t.month as f64,
            ..t.base.clone()
        };
        encode_condition_into(&raw, stats, &mut cond[i * row..(i + 1) * row])?;
    }
    let z = match model.kind() {
        ModelKind::Diffusion => {
            let cfg = &model.header.diffusion;
            let steps = opts.steps.unwrap_or_else(|| cfg.steps());
            let sigmas = sigma_schedule(cfg, steps)?;
            let mut x = Vec::with_capacity(tasks.len() * N_ROI);
            for t in tasks {
                x.extend(initial_noise(N_ROI, sigmas[0], &mut task_rng(opts.seed, t)));
            }
            let den = model.conditioned(&cond)?;
            run(&den, cfg.sampler, &sigmas, &mut x)?;
            x
        }
        ModelKind::UnetAttn | ModelKind::UnetPlain => model.raw_forward(None, None, &cond)?,
    };
    Ok(tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (0..N_ROI)
                .map(|r| t.base.baseline_cth[r] + stats.denormalize_residual(r, z[i * N_ROI + r]))
                .collect()
        })
        .collect())
}

fn run_tasks(model: &Model, tasks: &[Task<'_>], opts: &PredictOptions) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[Task<'_>]> = tasks.chunks(CHUNK).collect();
    let threads = opts.threads.max(1).min(chunks.len().max(1));
    let mut results: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..chunks.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, c) in results.iter_mut().zip(&chunks) {
            *slot = Some(run_chunk(model, c, opts));
        }
    } else {
        // Chunk i goes to worker i % threads; output order is by chunk index.
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(threads)
                            .map(|i| (i, run_chunk(model, chunks[i], opts)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("prediction worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let mut out = Vec::with_capacity(tasks.len());
    for r in results {
        out.extend(r.expect("every chunk ran")?);
    }
    Ok(out)
}

/// Predicts `|months| × K` thickness vectors from a conditioning state (its
/// `delta_months` is ignored). `id` keys the random substreams.
pub fn predict_trajectory(
    model: &Model,
    id: &str,
    base: &ConditionRaw,
    opts: &PredictOptions,
) -> Result<Vec<Vec<Vec<f64>>>> {
    opts.validate()?;
    model.validate()?;
    let k = effective_k(model, opts);
    let tasks: Vec<Task<'_>> = opts
        .months
        .iter()
        .flat_map(|&month| {
            (0..k).map(move |realization| Task {
                id,
                base,
                month,
                realization,
            })
        })
        .collect();
    let flat = run_tasks(model, &tasks, opts)?;
    Ok(flat.chunks(k).map(|c| c.to_vec()).collect())
}

fn effective_k(model: &Model, opts: &PredictOptions) -> usize {
    if model.kind() == ModelKind::Diffusion {
        opts.realizations
    } else {
        1
    }
}

/// Baseline conditioning state of a subject.
pub fn baseline_condition(s: &Subject) -> ConditionRaw {
    super::condition_at(s, s.baseline(), 1.0)
}

/// Predictions for every subject, in (subject, month, realization) order
/// regardless of the thread count.
pub fn predict_cohort(model: &Model, subjects: &[Subject], opts: &PredictOptions) -> Result<Vec<Prediction>> {
    opts.validate()?;
    model.validate()?;
    let k = effective_k(model, opts);
    let bases: Vec<ConditionRaw> = subjects.iter().map(baseline_condition).collect();
    let mut tasks = Vec::with_capacity(subjects.len() * opts.months.len() * k);
    for (s, base) in subjects.iter().zip(&bases) {
        for &month in &opts.months {
            for realization in 0..k {
                tasks.push(Task {
                    id: &s.id,
                    base,
                    month,
                    realization,
                });
            }
        }
    }
    let flat = run_tasks(model, &tasks, opts)?;
    Ok(tasks
        .iter()
        .zip(flat)
        .map(|(t, cth)| Prediction {
            subject_id: t.id.to_string(),
            target_month: t.month,
            realization: t.realization,
            cth,
        })
        .collect())
}

fn prediction_header() -> Vec<String> {
    ["subject_id", "target_month", "realization"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..N_ROI).map(crate::cohort::atlas::column_name))
        .collect()
}

/// Writes predictions in the given order, floats in shortest round-trip form.
pub fn write_predictions_csv<W: std::io::Write>(preds: &[Prediction], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(prediction_header())?;
    let mut row = Vec::with_capacity(3 + N_ROI);
    for p in preds {
        if p.cth.len() != N_ROI {
            return Err(Error::dim("predictions", format!("{} values for {}", p.cth.len(), p.subject_id)));
        }
        row.clear();
        row.push(p.subject_id.clone());
        row.push(p.target_month.to_string());
        row.push(p.realization.to_string());
        row.extend(p.cth.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a prediction CSV. `source` names the input in error messages.
pub fn read_predictions_csv<R: std::io::Read>(r: R, source: &str) -> Result<Vec<Prediction>> {
    let err = |line: u64, reason: String| Error::Parse {
        path: source.to_string(),
        line: line as usize,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let want = prediction_header();
    let hdr = rdr.headers()?.clone();
    if let Some(name) = want.iter().find(|n| !hdr.iter().any(|h| h == n.as_str())) {
        return Err(err(1, format!("missing column `{name}`")));
    }
    let idx: Vec<usize> = want
        .iter()
        .map(|n| hdr.iter().position(|h| h == n).expect("checked above"))
        .collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let subject_id = field(0).to_string();
        if subject_id.is_empty() {
            return Err(err(line, "empty subject_id".into()));
        }
        let target_month = field(1)
            .parse()
            .map_err(|_| err(line, format!("target_month `{}` is not a month offset", field(1))))?;
        let realization = field(2)
            .parse()
            .map_err(|_| err(line, format!("realization `{}` is not an index", field(2))))?;
        let cth = (0..N_ROI)
            .map(|r| {
                let s = field(3 + r);
                s.parse::<f64>()
                    .map_err(|_| err(line, format!("column `{}`: `{s}` is not a number", want[3 + r])))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Prediction {
            subject_id,
            target_month,
            realization,
            cth,
        });
    }
    Ok(out)
}
