//! The `cthdiff` command line: generate, train, predict, evaluate and
//! oracle-check.

mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{EvaluateConfig, ModelConfig, Paths, PredictConfig, RunConfig};

use crate::cohort::{
    compute_normalization, generate_cohort, load_cohort_csv, split_cohort, write_cohort_csv, Cohort,
};
use crate::denoiser::{checkpoint, ModelKind};
use crate::diffusion::{
    build_training_pairs, predict_cohort, read_predictions_csv, train, write_loss_log, write_predictions_csv,
    PredictOptions, TrainJob, TrainSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, write_artifacts, PointEstimate, PredictionSet};
use crate::oracle::run_checks;

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "CTHDIFF_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "cthdiff", version, about = "Conditional diffusion for cortical thickness trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON). Unset fields take their defaults.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort CSV.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the training split of a cohort.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// diffusion, unet_attn or unet_plain.
        #[arg(long, default_value = "diffusion")]
        model: ModelKind,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict follow-up thickness from baseline visits.
    Predict {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Comma-separated target months (any positive integers).
        #[arg(long, value_delimiter = ',')]
        months: Option<Vec<u32>>,
        #[arg(long)]
        realizations: Option<usize>,
        /// Sampler intervals (defaults to the checkpoint's NFE budget).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        /// Predict every subject instead of the held-out split.
        #[arg(long)]
        all_subjects: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predictions with ground truth and write the metrics report.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// mean or median.
        #[arg(long)]
        point_estimate: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the sampler against the analytic Gaussian oracle.
    OracleCheck {
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_point_estimate(s: &str) -> Result<PointEstimate> {
    match s {
        "mean" => Ok(PointEstimate::Mean),
        "median" => Ok(PointEstimate::Median),
        other => Err(Error::invalid("point_estimate", format!("{other:?} is not mean or median"))),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    RunConfig::load(arg.config.as_deref())
}

/// A path from its flag, else from the config; the resolved value is stored
/// back so the echo names it.
fn resolve(flag: Option<PathBuf>, slot: &mut Option<PathBuf>, name: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        *slot = Some(p);
    }
    slot.clone()
        .ok_or_else(|| Error::invalid(name, format!("give --{name} or set it under \"paths\" in the config")))
}

/// Creates the parent directory of an output path.
fn prepare(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Test split under `cfg.cohort`, or every subject.
fn select_subjects(cohort: Cohort, cfg: &RunConfig) -> Result<Cohort> {
    if cfg.predict.test_split_only {
        Ok(split_cohort(&cohort, &cfg.cohort)?.1)
    } else {
        Ok(cohort)
    }
}

/// Executes one command, writing human-readable progress to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Generate { config, out: path } => {
            let mut cfg = load_config(&config)?;
            let path = resolve(path, &mut cfg.paths.output, "out")?;
            cfg.validate()?;
            prepare(&path)?;
            let cohort = generate_cohort(&cfg.cohort)?;
            write_cohort_csv(&cohort, &path)?;
            cfg.echo(&path)?;
            writeln!(out, "wrote {} subjects to {}", cohort.len(), path.display())?;
        }
        Command::Train {
            config,
            cohort,
            model,
            epochs,
            seed,
            out: path,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cohort = resolve(cohort, &mut cfg.paths.cohort, "cohort")?;
            let path = resolve(path, &mut cfg.paths.output, "out")?;
            cfg.validate()?;
            prepare(&path)?;
            let data = load_cohort_csv(&cohort)?;
            let (train_split, _) = split_cohort(&data, &cfg.cohort)?;
            let stats = compute_normalization(&train_split)?;
            let pairs = build_training_pairs(&train_split, cfg.pairing, &stats);
            let set = TrainSet::from_pairs(&pairs, &stats)?;
            writeln!(
                out,
                "training {} on {} pairs for {} epochs",
                model.as_str(),
                set.len(),
                cfg.train.epochs
            )?;
            let job = TrainJob {
                kind: model,
                arch: model.arch(cfg.model.widths),
                diffusion: cfg.diffusion.clone(),
                hyper: cfg.train.clone(),
                stats: &stats,
                pairing: cfg.pairing,
                seed: cfg.seed,
            };
            let steps_per_epoch = set.len().div_ceil(cfg.train.batch_size);
            let mut epoch_loss = 0.0;
            let (m, log) = train(job, &set, |r| {
                epoch_loss += r.loss;
                if (r.step + 1) % steps_per_epoch == 0 {
                    let _ = writeln!(
                        out,
                        "epoch {:>5}  loss {:.5}  {} ms",
                        r.epoch,
                        epoch_loss / steps_per_epoch as f64,
                        r.wallclock_ms
                    );
                    epoch_loss = 0.0;
                }
            })?;
            checkpoint::save(&m, &path)?;
            let mut log_path = path.clone().into_os_string();
            log_path.push(".loss.csv");
            write_loss_log(&log, create(Path::new(&log_path))?)?;
            cfg.echo(&path)?;
            writeln!(out, "wrote checkpoint {}", path.display())?;
        }
        Command::Predict {
            config,
            ckpt,
            cohort,
            months,
            realizations,
            steps,
            threads,
            all_subjects,
            seed,
            out: path,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = months {
                cfg.predict.months = m;
            }
            if let Some(k) = realizations {
                cfg.predict.realizations = k;
            }
            if steps.is_some() {
                cfg.predict.steps = steps;
            }
            if let Some(t) = threads {
                cfg.predict.threads = t;
            }
            if all_subjects {
                cfg.predict.test_split_only = false;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ckpt = resolve(ckpt, &mut cfg.paths.checkpoint, "ckpt")?;
            let cohort = resolve(cohort, &mut cfg.paths.cohort, "cohort")?;
            let path = resolve(path, &mut cfg.paths.output, "out")?;
            cfg.validate()?;
            prepare(&path)?;
            let opts = PredictOptions {
                months: cfg.predict.months.clone(),
                realizations: cfg.predict.realizations,
                seed: cfg.seed,
                steps: cfg.predict.steps,
                threads: cfg.predict.threads,
            };
            opts.validate()?;
            let model = checkpoint::load(&ckpt)?;
            let subjects = select_subjects(load_cohort_csv(&cohort)?, &cfg)?;
            let preds = predict_cohort(&model, &subjects.subjects, &opts)?;
            let mut w = create(&path)?;
            write_predictions_csv(&preds, &mut w)?;
            w.flush()?;
            cfg.echo(&path)?;
            writeln!(
                out,
                "wrote {} predictions for {} subjects to {}",
                preds.len(),
                subjects.len(),
                path.display()
            )?;
        }
        Command::Evaluate {
            config,
            pred,
            truth,
            point_estimate,
            out: path,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = point_estimate {
                cfg.evaluate.point_estimate = parse_point_estimate(&p)?;
            }
            let pred = resolve(pred, &mut cfg.paths.predictions, "pred")?;
            let truth = resolve(truth, &mut cfg.paths.truth, "truth")?;
            let path = resolve(path, &mut cfg.paths.output, "out")?;
            cfg.validate()?;
            prepare(&path)?;
            let preds = read_predictions_csv(BufReader::new(File::open(&pred)?), &pred.display().to_string())?;
            let set = PredictionSet::from_predictions(&preds)?;
            let truth_cohort = load_cohort_csv(&truth)?;
            let (report, matched, rows) = build_report(&set, &truth_cohort, cfg.evaluate.point_estimate)?;
            write_artifacts(&report, &matched, &rows, &path)?;
            cfg.echo(&path)?;
            for s in &report.mae_table.overall {
                writeln!(
                    out,
                    "MAE {:<4} n={:<4} {:.4} ± {:.4}",
                    format!("{:?}", s.group),
                    s.n_subjects,
                    s.mean,
                    s.sd
                )?;
            }
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::OracleCheck { steps, samples, seed } => {
            let rows = run_checks(steps, samples, seed)?;
            writeln!(out, "{:<26} {:>12}  {:<10} result", "check", "value", "threshold")?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<26} {:>12.4e}  {:<10} {}",
                    r.name,
                    r.value,
                    r.threshold,
                    if r.pass { "PASS" } else { "FAIL" }
                )?;
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Error::Domain(format!("oracle checks failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

/// Machine-readable error line.
pub fn error_json(e: &Error) -> String {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a failed run (with a JSON error line on stderr), 2 on
/// bad usage.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli.command, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_json() {
        let e = Error::invalid("months", "0 must lie in (0, 120]");
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"]["kind"], "validation");
    }

    #[test]
    fn month_list_parses() {
        let cli = Cli::try_parse_from([
            "cthdiff", "predict", "--ckpt", "c", "--cohort", "x", "--months", "6,18,36", "--out", "p",
        ])
        .unwrap();
        match cli.command {
            Command::Predict { months, .. } => assert_eq!(months, Some(vec![6, 18, 36])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert_eq!(main_with(["cthdiff", "train", "--nope"]), 2);
        assert_eq!(main_with(["cthdiff", "train", "--cohort", "c", "--model", "gan", "--out", "x"]), 2);
    }

    #[test]
    fn zero_month_is_a_validation_failure() {
        assert_eq!(
            main_with(["cthdiff", "predict", "--ckpt", "c", "--cohort", "x", "--months", "0", "--out", "p"]),
            1
        );
    }
}
