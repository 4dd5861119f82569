use approx::assert_relative_eq;

use super::*;
use crate::denoiser::tests::{model, random_cond, scramble};
use crate::denoiser::{ArchConfig, Denoise, ModelKind, Precond, COND_CHANNELS};
use crate::error::{Error, Result};
use crate::oracle::GaussianPrior;
use crate::rng;
use crate::N_ROI;

#[test]
fn perturb_zero_sigma_is_identity_and_seeded() {
    let x0: Vec<f64> = (0..N_ROI).map(|i| i as f64 * 0.1).collect();
    assert_eq!(perturb(&x0, 0.0, &mut rng::labeled(1, "p")).unwrap(), x0);
    let a = perturb(&x0, 0.7, &mut rng::labeled(2, "p")).unwrap();
    let b = perturb(&x0, 0.7, &mut rng::labeled(2, "p")).unwrap();
    assert_eq!(a, b);
    assert!(perturb(&x0, -1.0, &mut rng::labeled(2, "p")).is_err());
}

#[test]
fn perturb_statistics() {
    let x0: Vec<f64> = (0..N_ROI).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut r = rng::labeled(3, "perturb-stats");
    let n = 10_000;
    let mut sum = vec![0.0; N_ROI];
    let mut sq = vec![0.0; N_ROI];
    for _ in 0..n {
        for (j, v) in perturb(&x0, 1.0, &mut r).unwrap().into_iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    for j in 0..N_ROI {
        let m = sum[j] / n as f64;
        let var = sq[j] / n as f64 - m * m;
        assert!((m - x0[j]).abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }
}

#[test]
fn training_sigma_distribution() {
    let cfg = DiffusionConfig::default();
    let mut r = rng::labeled(4, "sigma");
    let mut s: Vec<f64> = (0..100_000).map(|_| sample_sigma_train(&cfg, &mut r)).collect();
    assert!(s.iter().all(|&v| v > 0.0));
    s.sort_by(f64::total_cmp);
    let median = 0.5 * (s[49_999] + s[50_000]);
    assert!((median / (-1.2f64).exp() - 1.0).abs() < 0.03, "{median}");
    let fixed = DiffusionConfig { p_std: 0.0, ..cfg };
    assert_relative_eq!(sample_sigma_train(&fixed, &mut r), 0.301_194_211_912_202_1, epsilon = 1e-15);
}

#[test]
fn sampler_call_counts() {
    let prior = GaussianPrior::isotropic(N_ROI, 0.0, 1.0).unwrap();
    let cfg = DiffusionConfig::default();
    for n in [1, 2, 7] {
        let sigmas = sigma_schedule(&cfg, n).unwrap();
        let mut x = vec![1.0; N_ROI];
        assert_eq!(heun_sample(&prior, &sigmas, &mut x).unwrap(), 2 * n - 1);
        assert_eq!(euler_sample(&prior, &sigmas, &mut x).unwrap(), n);
    }
    assert!(cfg.steps() * 2 <= cfg.nfe);
    let euler = DiffusionConfig {
        sampler: SamplerKind::Euler,
        ..cfg
    };
    assert_eq!(euler.steps(), 1000);
}

struct Exploding;

impl Denoise for Exploding {
    fn denoise(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<()> {
        for (o, v) in out.iter_mut().zip(x) {
            *o = if sigma < 1.0 { f64::NAN } else { *v };
        }
        Ok(())
    }
}

#[test]
fn non_finite_state_reports_the_step() {
    let cfg = DiffusionConfig::default();
    let sigmas = sigma_schedule(&cfg, 10).unwrap();
    let first_below = sigmas.iter().position(|&s| s < 1.0).unwrap();
    let mut x = vec![0.5; N_ROI];
    match heun_sample(&Exploding, &sigmas, &mut x) {
        Err(Error::Sampling { step }) => assert_eq!(step, first_below - 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn network_sampling_is_deterministic() {
    let mut m = model(ModelKind::Diffusion, [8, 8, 8], 1);
    scramble(&mut m.params, 2);
    for p in m.params.tensors_mut() {
        for v in p.data_mut() {
            *v *= 0.2;
        }
    }
    let cond = random_cond(2, 3);
    let den = m.conditioned(&cond).unwrap();
    let cfg = DiffusionConfig::default();
    let a = sample(&den, &cfg, 8, 2 * N_ROI, &mut rng::labeled(9, "s")).unwrap();
    let b = sample(&den, &cfg, 8, 2 * N_ROI, &mut rng::labeled(9, "s")).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

fn gaussian_batch(rows: usize, sd: f64, seed: u64) -> Vec<f64> {
    initial_noise(rows * N_ROI, sd, &mut rng::labeled(seed, "x0"))
}

#[test]
fn zero_network_loss_matches_closed_form() {
    // With F ≡ 0 and x₀ ~ N(0, σ_d²): E‖c_skip·x − x₀‖² = 68·c_out², so the
    // EDM-weighted loss is 68 at every σ and the uniform one 68·c_out².
    let sd = 0.8;
    let precond = Precond { sigma_data: sd };
    let arch = ArchConfig::diffusion([8, 8, 8]);
    let params = crate::denoiser::init_params(&arch, &mut rng::labeled(0, "z")).unwrap();
    let rows = 2000;
    let x0 = gaussian_batch(rows, sd, 5);
    let cond = vec![0.0f32; rows * COND_CHANNELS * N_ROI];
    for sigma in [0.2, 5.0, 40.0] {
        let noise = LossNoise {
            sigmas: vec![sigma; rows],
            noise: gaussian_batch(rows, 1.0, 6),
        };
        let edm = denoising_loss(&arch, &params, precond, LossWeighting::Edm, &x0, &cond, &noise).unwrap();
        assert!((edm.loss / 68.0 - 1.0).abs() < 0.03, "σ={sigma}: {}", edm.loss);
        let uni = denoising_loss(&arch, &params, precond, LossWeighting::Uniform, &x0, &cond, &noise).unwrap();
        let want = 68.0 * precond.c_out(sigma).powi(2);
        assert!((uni.loss / want - 1.0).abs() < 0.03, "σ={sigma}: {} vs {want}", uni.loss);
    }
}

#[test]
fn loss_rejects_mismatched_batches() {
    let arch = ArchConfig::diffusion([8, 8, 8]);
    let params = crate::denoiser::init_params(&arch, &mut rng::labeled(0, "z")).unwrap();
    let precond = Precond { sigma_data: 1.0 };
    let x0 = vec![0.0; 2 * N_ROI];
    let cond = vec![0.0f32; 2 * COND_CHANNELS * N_ROI];
    let noise = LossNoise {
        sigmas: vec![1.0],
        noise: vec![0.0; N_ROI],
    };
    assert!(denoising_loss(&arch, &params, precond, LossWeighting::Edm, &x0, &cond, &noise).is_err());
    assert!(regression_loss(&arch, &params, &x0[..N_ROI], &cond).is_err());
}

fn tiny_set(rows: usize, seed: u64) -> TrainSet {
    TrainSet {
        x0: gaussian_batch(rows, 1.0, seed),
        cond: random_cond(rows, seed),
    }
}

fn tiny_job(kind: ModelKind, epochs: usize, stats: &crate::cohort::NormalizationStats) -> TrainJob<'_> {
    TrainJob {
        kind,
        arch: kind.arch([8, 8, 8]),
        diffusion: DiffusionConfig::default(),
        hyper: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        stats,
        pairing: PairingPolicy::AllOrdered,
        seed: 42,
    }
}

#[test]
fn optimizer_step_counts() {
    let stats = crate::cohort::NormalizationStats::identity();
    let (m, log) = train(tiny_job(ModelKind::Diffusion, 1, &stats), &tiny_set(64, 1), |_| {}).unwrap();
    assert_eq!(m.header.training.optimizer_steps, 1);
    assert_eq!(log.len(), 1);
    let (m, log) = train(tiny_job(ModelKind::UnetPlain, 2, &stats), &tiny_set(65, 1), |_| {}).unwrap();
    assert_eq!(m.header.training.optimizer_steps, 4);
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    assert!(log.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    assert!(train(tiny_job(ModelKind::Diffusion, 1, &stats), &TrainSet::default(), |_| {}).is_err());
}

#[test]
fn training_is_bit_reproducible() {
    let stats = crate::cohort::NormalizationStats::identity();
    let set = tiny_set(100, 2);
    for kind in [ModelKind::Diffusion, ModelKind::UnetAttn] {
        let (a, la) = train(tiny_job(kind, 2, &stats), &set, |_| {}).unwrap();
        let (b, lb) = train(tiny_job(kind, 2, &stats), &set, |_| {}).unwrap();
        let bytes = crate::denoiser::checkpoint::to_bytes(&a).unwrap();
        assert_eq!(bytes, crate::denoiser::checkpoint::to_bytes(&b).unwrap());
        let losses = |l: &[LossRecord]| l.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&la), losses(&lb));
    }
}

#[test]
fn loss_log_schema() {
    let log = vec![LossRecord {
        epoch: 0,
        step: 0,
        loss: 1.5,
        sigma_mean: 0.25,
        wallclock_ms: 7,
    }];
    let mut buf = Vec::new();
    write_loss_log(&log, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "epoch,step,loss,sigma_mean,wallclock_ms\n0,0,1.5,0.25,7\n");
}

fn subject() -> crate::cohort::Subject {
    crate::cohort::Subject {
        id: "S0001".into(),
        sex: 1,
        age_bl: 72.0,
        visits: vec![crate::cohort::Visit {
            month: 0,
            dx: crate::cohort::Diagnosis::MCI,
            cth: (0..N_ROI).map(|i| 2.0 + 0.01 * i as f64).collect(),
        }],
    }
}

fn opts(months: Vec<u32>, realizations: usize, threads: usize) -> PredictOptions {
    PredictOptions {
        months,
        realizations,
        seed: 7,
        steps: Some(4),
        threads,
    }
}

#[test]
fn trajectory_shape_and_determinism() {
    let mut m = model(ModelKind::Diffusion, [8, 8, 8], 3);
    scramble(&mut m.params, 4);
    for p in m.params.tensors_mut() {
        for v in p.data_mut() {
            *v *= 0.2;
        }
    }
    let s = subject();
    let base = baseline_condition(&s);
    let o = opts(vec![6, 12, 30], 3, 1);
    let a = predict_trajectory(&m, &s.id, &base, &o).unwrap();
    assert_eq!((a.len(), a[0].len(), a[0][0].len()), (3, 3, N_ROI));
    assert_eq!(a, predict_trajectory(&m, &s.id, &base, &o).unwrap());
    assert_ne!(a[0][0], a[0][1], "realizations use distinct substreams");
    assert!(predict_trajectory(&m, &s.id, &base, &opts(vec![0], 1, 1)).is_err());
    assert!(predict_trajectory(&m, &s.id, &base, &opts(vec![6], 0, 1)).is_err());
}

#[test]
fn thread_count_does_not_change_predictions() {
    let mut m = model(ModelKind::Diffusion, [8, 8, 8], 5);
    scramble(&mut m.params, 6);
    for p in m.params.tensors_mut() {
        for v in p.data_mut() {
            *v *= 0.2;
        }
    }
    let subjects: Vec<_> = (0..5)
        .map(|i| crate::cohort::Subject {
            id: format!("S{i:04}"),
            ..subject()
        })
        .collect();
    let serial = predict_cohort(&m, &subjects, &opts(vec![6, 36], 4, 1)).unwrap();
    let parallel = predict_cohort(&m, &subjects, &opts(vec![6, 36], 4, 3)).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.len(), 5 * 2 * 4);
    // A task's result does not depend on which other tasks share its chunk.
    let alone = predict_cohort(&m, &subjects[3..4], &opts(vec![36], 4, 1)).unwrap();
    let from_all: Vec<_> = serial.iter().filter(|p| p.subject_id == "S0003" && p.target_month == 36).cloned().collect();
    assert_eq!(alone, from_all);
}

#[test]
fn prediction_csv_roundtrip() {
    let m = model(ModelKind::UnetAttn, [8, 8, 8], 7);
    let preds = predict_cohort(&m, &[subject()], &opts(vec![6, 12], 5, 1)).unwrap();
    assert_eq!(preds.len(), 2, "deterministic models emit one realization");
    assert!(preds.iter().all(|p| p.realization == 0));
    let mut buf = Vec::new();
    write_predictions_csv(&preds, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("subject_id,target_month,realization,roi_001,"));
    assert_eq!(read_predictions_csv(buf.as_slice(), "mem").unwrap(), preds);
    let broken = text.replace("roi_068", "roi_x");
    let err = read_predictions_csv(broken.as_bytes(), "mem").unwrap_err().to_string();
    assert!(err.contains("roi_068"), "{err}");
}

#[test]
fn loss_trends_down_on_gaussian_task() {
    // Narrow prior around a per-ROI mean: the irreducible weighted loss is
    // far below the zero-network value, so the trend is visible quickly.
    let mean: Vec<f64> = (0..N_ROI).map(|j| (j as f64 * 0.7).sin()).collect();
    let prior = GaussianPrior::new(mean, vec![0.1; N_ROI]).unwrap();
    let sd = 0.72;
    let kind = ModelKind::Diffusion;
    let hyper = TrainConfig::default();
    let mut t = Trainer::new(kind, kind.arch([8, 8, 8]), DiffusionConfig::default(), sd, &hyper, 3).unwrap();
    let mut r = rng::labeled(3, "trend");
    let cond = vec![0.0f32; 64 * COND_CHANNELS * N_ROI];
    let losses: Vec<f64> = (0..600)
        .map(|_| t.step(&prior.sample(64, &mut r), &cond, &mut r).unwrap().0)
        .collect();
    let head = losses[..100].iter().sum::<f64>() / 100.0;
    let tail = losses[500..].iter().sum::<f64>() / 100.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}
