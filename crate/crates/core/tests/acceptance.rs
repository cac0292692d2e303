//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use hybrid_diffusion::asymptotics::{noise_matrix_w1, sigma_index, sigma_inverse};
use hybrid_diffusion::bayes::{posterior_mean, McmcConfig, ProposalScale, Sampler};
use hybrid_diffusion::contrasts::alpha_tempering;
use hybrid_diffusion::harness::{
    maximize_contrast, run_experiment, sample_sd, ExperimentConfig, ExperimentReport,
    MaximizeOptions, Mode,
};
use hybrid_diffusion::multistep::newton_refine;
use hybrid_diffusion::simulate::{simulate_path, SimulationConfig};
use hybrid_diffusion::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const DESK_PRESET: &str = include_str!("../../../presets/paper4-desk.toml");

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn tuning(n: usize, h: f64) -> TuningConfig {
    TuningConfig::new(n, h)
}

// ---------------------------------------------------------------- 1

fn c1_newton_step_counts() -> Check {
    let t = Instant::now();
    let mut remark_alpha = tuning(100_000_000, 1e-8f64.powf(0.7));
    remark_alpha.tau1 = 2.0;
    remark_alpha.tau3 = 1.9;
    remark_alpha.q1 = 0.25;
    remark_alpha.eta1 = 47.0 / 60.0;
    let desk = tuning(50_000_000, 4e-6);
    let mut remark_beta = tuning(100_000_000, 1e-8f64.powf(0.7));
    remark_beta.tau2 = 1.2;
    remark_beta.q2 = 2f64.powi(-8);
    remark_beta.eta2 = 5.0 / 6.0;
    let got = [
        compute_j1(&remark_alpha).unwrap(),
        compute_j1(&desk).unwrap(),
        compute_j2(&desk).unwrap(),
        compute_j2(&remark_beta).unwrap(),
    ];
    let elapsed = t.elapsed().as_secs_f64();
    check(
        got == [2, 1, 1, 9] && elapsed < 1e-3,
        format!(
            "J = {got:?}, expected [2, 1, 1, 9], {:.1} µs",
            elapsed * 1e6
        ),
    )
}

// ---------------------------------------------------------------- 2

fn c2_noise_variance() -> Check {
    let t = Instant::now();
    let n = 1_000_000;
    let h = (n as f64).powf(-0.7);
    let lam: f64 = 1e-3;
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let y: Vec<f64> = (0..(n + 1) * 3)
        .map(|_| lam.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let obs = NoisyObservations::new(y, 3, h).unwrap();
    let est = estimate_noise_variance(&obs).lambda_hat;
    let target = DMatrix::<f64>::identity(3, 3) * lam;
    let pure_err = (&est - &target).amax();

    let model = builtin_model("ou-1d").unwrap();
    let sim = SimulationConfig::new(
        model,
        vec![1.0],
        vec![1.0],
        vec![0.0],
        n,
        h,
        DMatrix::from_element(1, 1, lam),
        12,
    );
    let ou = simulate_path(&sim).unwrap();
    let ou_bias = rel_err(estimate_noise_variance(&ou).lambda_hat[(0, 0)], lam);
    let elapsed = t.elapsed().as_secs_f64();
    check(
        pure_err < 5e-5 && ou_bias < 0.06 && elapsed < 10.0,
        format!(
            "pure noise max|Λ̂-Λ| = {pure_err:.2e} (< 5e-5), OU relative bias = {:.2}% (< 6%), {elapsed:.1} s",
            100.0 * ou_bias
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Closed-form maximizers for `dX = β dt + √α dW`: both diffusion contrasts
/// are maximized at `α = (3/2) mean(D²)/Δ - cλ`, both drift contrasts at
/// `β = Σ D / (N Δ)`, with `D_j = ȳ_{j+1} - ȳ_j`, `j = 1..=K-2`.
fn bm_closed_forms(series: &LocalMeanSeries, k: usize, c: f64, lam: f64) -> (f64, f64) {
    let delta = series.delta();
    let diffs: Vec<f64> = (1..=k - 2)
        .map(|j| series.row(j + 1)[0] - series.row(j)[0])
        .collect();
    let nn = diffs.len() as f64;
    let alpha = 1.5 * diffs.iter().map(|d| d * d).sum::<f64>() / (nn * delta) - c * lam;
    let beta = diffs.iter().sum::<f64>() / (nn * delta);
    (alpha, beta)
}

fn c3_closed_forms() -> Check {
    let model = builtin_model("bm-1d").unwrap();
    let n = 200_000;
    let h = (n as f64).powf(-0.7);
    let lam = 1e-3;
    let sim = SimulationConfig::new(
        model.clone(),
        vec![1.5],
        vec![0.7],
        vec![0.0],
        n,
        h,
        DMatrix::from_element(1, 1, lam),
        31,
    );
    let obs = simulate_path(&sim).unwrap();
    let lambda = DMatrix::from_element(1, 1, lam);
    let cfg = tuning(n, h);
    let sched = make_schedule(&cfg, 2.0, Some(cfg.eta1)).unwrap();
    let series = local_means(&obs, &sched).unwrap();
    let eff = EffectiveDiffusion::new(EffectiveMode::Stage3, &sched);
    let space = ParamSpace::cube(1, 0.01, 10.0).unwrap();

    let (a_red, b_red) = bm_closed_forms(&series, sched.k_reduced, eff.noise_factor(), lam);
    let (a_full, b_full) = bm_closed_forms(&series, sched.k, eff.noise_factor(), lam);
    let alpha_true = [1.5];
    let contrasts = [
        (
            "W1",
            Contrast::w1(&model, &series, &lambda, eff, sched.k_reduced).unwrap(),
            a_red,
        ),
        (
            "W2",
            Contrast::w2(&model, &series, sched.k_reduced).unwrap(),
            b_red,
        ),
        (
            "H1",
            Contrast::h1_full(&model, &series, &lambda, eff).unwrap(),
            a_full,
        ),
        (
            "H2",
            Contrast::h2_full(&model, &series, &alpha_true).unwrap(),
            b_full,
        ),
    ];
    let opts = MaximizeOptions {
        tol: 1e-12,
        ..Default::default()
    };
    let mut worst_opt = 0.0f64;
    let mut worst_newton = 0.0f64;
    let mut h1_steps = 0usize;
    let mut lines = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for (name, c, exact) in &contrasts {
        let fit = maximize_contrast(c, &[5.0], &space, &opts).unwrap();
        let e = rel_err(fit.theta[0], *exact);
        worst_opt = worst_opt.max(e);
        if *name == "H1" {
            // not quadratic in α: count steps to reach the maximizer instead
            let start = [exact * rng.random_range(0.7..1.3)];
            let tr = newton_refine(c, &start, sched.k as f64, 8, &space, DerivativeEngine::Auto)
                .unwrap();
            h1_steps = tr
                .iterates
                .iter()
                .position(|t| rel_err(t[0], *exact) < 1e-8)
                .unwrap_or(usize::MAX);
            lines.push(format!("{name} ML {e:.1e}, Newton {h1_steps} steps"));
        } else {
            let mut worst = 0.0f64;
            for _ in 0..5 {
                let start = [rng.random_range(0.02..9.9)];
                let tr =
                    newton_refine(c, &start, sched.k as f64, 1, &space, DerivativeEngine::Auto)
                        .unwrap();
                worst = worst.max(rel_err(tr.iterates[1][0], *exact));
            }
            worst_newton = worst_newton.max(worst);
            lines.push(format!("{name} ML {e:.1e}, 1-step Newton {worst:.1e}"));
        }
    }
    check(
        worst_opt < 1e-8 && worst_newton < 1e-8 && h1_steps <= 6,
        format!("rtol 1e-8: {}", lines.join("; ")),
    )
}

// ---------------------------------------------------------------- 4

fn c4_derivatives() -> Check {
    let model = builtin_model("paper-3d").unwrap();
    let n = 100_000;
    let h = (n as f64).powf(-0.7);
    let lam = DMatrix::<f64>::identity(3, 3) * 1e-3;
    let sim = SimulationConfig::new(
        model.clone(),
        vec![1.0, 2.0, 3.0],
        vec![1.0, 2.0, 2.0, 3.0, 3.0, 4.0],
        vec![1.0; 3],
        n,
        h,
        lam.clone(),
        41,
    );
    let obs = simulate_path(&sim).unwrap();
    let cfg = tuning(n, h);
    let sched = make_schedule(&cfg, 2.0, Some(cfg.eta1)).unwrap();
    let series = local_means(&obs, &sched).unwrap();
    let eff = EffectiveDiffusion::new(EffectiveMode::Stage3, &sched);
    let mut rng = ChaCha20Rng::seed_from_u64(43);
    let mut worst_grad = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_hess = 0.0f64;
    for _ in 0..20 {
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..8.0)).collect();
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..8.0)).collect();
        let cs = [
            (
                Contrast::w1(&model, &series, &lam, eff, sched.k_reduced).unwrap(),
                alpha.clone(),
            ),
            (
                Contrast::w2(&model, &series, sched.k_reduced).unwrap(),
                beta.clone(),
            ),
            (
                Contrast::h1_full(&model, &series, &lam, eff).unwrap(),
                alpha.clone(),
            ),
            (
                Contrast::h2_full(&model, &series, &alpha).unwrap(),
                beta.clone(),
            ),
        ];
        for (c, theta) in &cs {
            let an = c
                .evaluate(theta, Order::Hessian, DerivativeEngine::Auto)
                .unwrap();
            let fd = c
                .evaluate(theta, Order::Hessian, DerivativeEngine::FiniteDifference)
                .unwrap();
            let ga = an.gradient.unwrap();
            let gf = fd.gradient.unwrap();
            let scale = ga.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for (a, f) in ga.iter().zip(&gf) {
                // components far below the gradient's magnitude are compared
                // against that magnitude
                worst_grad = worst_grad.max((a - f).abs() / a.abs().max(1e-3 * scale));
            }
            let ha = an.hessian.unwrap();
            let hf = fd.hessian.unwrap();
            for hm in [&ha, &hf] {
                let asym = (hm - hm.transpose()).amax() / hm.amax().max(f64::MIN_POSITIVE);
                worst_sym = worst_sym.max(asym);
            }
            worst_hess = worst_hess.max((&ha - &hf).amax() / ha.amax().max(f64::MIN_POSITIVE));
        }
    }
    check(
        worst_grad <= 1e-4 && worst_sym <= 1e-8,
        format!(
            "80 gradient pairs: worst relative error {worst_grad:.2e} (≤ 1e-4); Hessian asymmetry {worst_sym:.1e} (≤ 1e-8); analytic vs FD Hessian {worst_hess:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Batch-means standard error of the mean of `xs`.
fn batch_se(xs: &[f64]) -> f64 {
    let b = (xs.len() as f64).sqrt() as usize;
    let nb = xs.len() / b;
    let means: Vec<f64> = (0..nb)
        .map(|i| xs[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    sample_sd(&means) / (nb as f64).sqrt()
}

fn c5_mcmc() -> Check {
    let space = ParamSpace::cube(2, 0.0, 1.0).unwrap();
    let mut flat = McmcConfig::new(101_000, 1_000, 51);
    flat.proposal_scale = ProposalScale::Shared(0.3);
    let s = posterior_mean(|_| Ok(0.0), &space, &flat).unwrap();
    let draws = (flat.n_iters - flat.burn_in) as f64;
    let flat_dev = s.mean.iter().map(|m| (m - 0.5).abs()).fold(0.0, f64::max);
    let flat_ok = flat_dev < 3.0 / draws.sqrt();

    let (mu, sigma, lo, hi) = (0.3, 0.2, 0.0, 1.0);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let (za, zb) = ((lo - mu) / sigma, (hi - mu) / sigma);
    let exact = mu + sigma * (nd.pdf(za) - nd.pdf(zb)) / (nd.cdf(zb) - nd.cdf(za));
    let line = ParamSpace::cube(1, lo, hi).unwrap();
    let mut tg_ok = true;
    let mut tg_detail = Vec::new();
    for (label, sampler) in [("rwm", Sampler::Rwm), ("mpcn", Sampler::Mpcn { rho: 0.8 })] {
        let mut cfg = McmcConfig::new(202_000, 2_000, 52);
        cfg.sampler = sampler;
        cfg.proposal_scale = ProposalScale::Shared(0.2);
        cfg.store_chain = true;
        let s = posterior_mean(|x| Ok(-0.5 * ((x[0] - mu) / sigma).powi(2)), &line, &cfg).unwrap();
        let chain: Vec<f64> = s.chain.as_ref().unwrap()[cfg.burn_in..]
            .iter()
            .map(|r| r.theta[0])
            .collect();
        let se = batch_se(&chain);
        let z = (s.mean[0] - exact).abs() / se;
        tg_ok &= z < 3.0;
        tg_detail.push(format!("{label} {:.3} sigma", z));
    }

    let mut same = true;
    for sampler in [Sampler::Rwm, Sampler::Mpcn { rho: 0.5 }] {
        let mut cfg = McmcConfig::new(5_000, 500, 53);
        cfg.sampler = sampler;
        cfg.store_chain = true;
        cfg.target_accept = Some(0.3);
        let target = |x: &[f64]| Ok(-(x[0] - 0.2).powi(2) * 20.0 - (x[1] - 0.7).powi(2) * 5.0);
        let a = posterior_mean(target, &space, &cfg).unwrap();
        let b = posterior_mean(target, &space, &cfg).unwrap();
        let bits = |s: &hybrid_diffusion::bayes::PosteriorSummary| -> Vec<u64> {
            s.chain
                .as_ref()
                .unwrap()
                .iter()
                .flat_map(|r| r.theta.iter().map(|v| v.to_bits()))
                .collect()
        };
        same &= bits(&a) == bits(&b);
    }
    check(
        flat_ok && tg_ok && same,
        format!(
            "flat |mean-0.5| = {flat_dev:.2e} (< {:.2e}); truncated Gaussian mean {exact:.5}, deviation {}; same-seed chains identical: {same}",
            3.0 / draws.sqrt(),
            tg_detail.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6

fn ou_config(n: usize, gamma: f64, replications: usize) -> ExperimentConfig {
    let text = format!(
        r#"
model = "ou-1d"
replications = {replications}
seed = 606
modes = ["hybrid"]

[simulation]
alpha = [1.0]
beta = [1.0]
x0 = [0.0]
lambda_diag = [1e-3]

[tuning]
n = {n}
h = {h:e}
eta1 = 0.9
eta2 = 0.9
gamma = {gamma}
gamma_prime = 0.7

[mcmc_alpha]
n_iters = 4000
burn_in = 1000
proposal_scale = 0.02
target_accept = 0.35
sampler = {{ kind = "mpcn", rho = 0.8 }}

[mcmc_beta]
n_iters = 8000
burn_in = 2000
proposal_scale = 0.02
target_accept = 0.35
sampler = {{ kind = "mpcn", rho = 0.8 }}
"#,
        h = 1e6f64.powf(-0.7)
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn column(report: &ExperimentReport, table: u8) -> Vec<f64> {
    report.estimates(table).iter().map(|v| v[0]).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c6_ou_recovery() -> Check {
    let t = Instant::now();
    let big = run_experiment(&ou_config(1_000_000, 0.7, 20)).unwrap();
    let (alpha, beta) = (column(&big, 8), column(&big, 9));
    let a_err = rel_err(mean(&alpha), 1.0);
    let b_err = rel_err(mean(&beta), 1.0);
    // the s.d. ratio is estimated from 100 nested pairs; with 20 its sampling
    // error alone spans the acceptance band
    let ratio_reps = 100;
    let big_many = run_experiment(&ou_config(1_000_000, 0.7, ratio_reps)).unwrap();
    let small_many = run_experiment(&ou_config(250_000, 0.8, ratio_reps)).unwrap();
    let ratio = sample_sd(&column(&small_many, 8)) / sample_sd(&column(&big_many, 8));
    let elapsed = t.elapsed().as_secs_f64();
    check(
        a_err < 0.10 && b_err < 0.25 && (1.2..=2.2).contains(&ratio) && elapsed < 600.0,
        format!(
            "mean α̂ = {:.4} ({:.1}% < 10%), mean β̂ = {:.4} ({:.1}% < 25%), s.d.(k)/s.d.(4k) = {ratio:.3} in [1.2, 2.2], {elapsed:.0} s",
            mean(&alpha),
            100.0 * a_err,
            mean(&beta),
            100.0 * b_err
        ),
    )
}

// ---------------------------------------------------------------- 7 & 8

fn desk_report() -> (ExperimentReport, f64) {
    let t = Instant::now();
    let mut cfg = ExperimentConfig::from_toml(DESK_PRESET).unwrap();
    cfg.replications = 6;
    cfg.modes = vec![Mode::Hybrid, Mode::MlTrueInit, Mode::MlUniformInit];
    cfg.output_dir = None;
    let report = run_experiment(&cfg).unwrap();
    (report, t.elapsed().as_secs_f64())
}

fn c7_hybrid_matches_ml(report: &ExperimentReport, seconds: f64) -> Check {
    let mut pass = report.succeeded.len() >= 5;
    let mut parts = vec![format!(
        "{} paths in {seconds:.0} s",
        report.succeeded.len()
    )];
    for (label, ml, hy) in [("alpha", 2u8, 8u8), ("beta", 3, 9)] {
        let ml_est = report.estimates(ml);
        let hy_est = report.estimates(hy);
        let m = ml_est[0].len();
        let mut worst = 0.0f64;
        let mut misses = 0;
        for i in 0..m {
            let col: Vec<f64> = ml_est.iter().map(|v| v[i]).collect();
            let sd = sample_sd(&col);
            for (a, b) in hy_est.iter().zip(&ml_est) {
                let r = (a[i] - b[i]).abs() / sd;
                worst = worst.max(r);
                if r >= 0.5 {
                    misses += 1;
                }
            }
        }
        pass &= misses == 0;
        parts.push(format!(
            "{label}: worst |hybrid-ML|/s.d.(ML) = {worst:.3} (< 0.5), {misses} of {} path-coordinates outside",
            m * hy_est.len()
        ));
    }
    check(pass, parts.join("; "))
}

fn c8_initializer_sensitivity(report: &ExperimentReport) -> Check {
    let uni = report.table(5).unwrap();
    let hyb = report.table(9).unwrap();
    let ratios: Vec<f64> = uni.sd.iter().zip(&hyb.sd).map(|(u, h)| u / h).collect();
    let wins = ratios.iter().filter(|r| **r >= 3.0).count();
    check(
        wins >= 2,
        format!(
            "s.d.(ML uniform)/s.d.(hybrid) per β coordinate = [{}]; {wins} coordinates ≥ 3",
            ratios
                .iter()
                .map(|r| format!("{r:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn random_series(rng: &mut ChaCha20Rng, d: usize, k: usize) -> LocalMeanSeries {
    let sched = BlockSchedule {
        tau: 2.0,
        p: 10,
        delta: rng.random_range(1e-3..1e-1),
        k,
        k_reduced: k,
        t_reduced: 0.0,
    };
    let scale = rng.random_range(0.01..5.0);
    let ybar = (0..k * d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    LocalMeanSeries::from_means(ybar, d, sched).unwrap()
}

fn c9_properties() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(91);
    let model = builtin_model("paper-3d").unwrap();
    let mut max_contrast = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let k = rng.random_range(3..40);
        let series = random_series(&mut rng, 3, k);
        let lam = DMatrix::<f64>::identity(3, 3) * rng.random_range(0.0..1e-2);
        let eff = EffectiveDiffusion {
            mode: EffectiveMode::Stage3,
            tau: 2.0,
            delta: series.delta(),
        };
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..10.0)).collect();
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..10.0)).collect();
        let w1 = Contrast::w1(&model, &series, &lam, eff, k)
            .unwrap()
            .value(&alpha)
            .unwrap();
        let w2 = Contrast::w2(&model, &series, k)
            .unwrap()
            .value(&beta)
            .unwrap();
        max_contrast = max_contrast.max(w1).max(w2);
    }
    let contrasts_ok = max_contrast <= 0.0;

    let mut min_eig = f64::INFINITY;
    for trial in 0..200 {
        let d = 1 + trial % 4;
        let n = rng.random_range(1..200);
        let rank_one = trial % 3 == 0;
        let y: Vec<f64> = (0..(n + 1) * d)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                if rank_one {
                    (i / d) as f64 * z.signum()
                } else {
                    z
                }
            })
            .collect();
        let est = estimate_noise_variance(&NoisyObservations::new(y, d, 1e-3).unwrap()).lambda_hat;
        let scale = est.amax().max(1.0);
        min_eig = min_eig.min(est.symmetric_eigenvalues().min() / scale);
    }
    let psd_ok = min_eig >= -1e-12;

    let mut sigma_ok = true;
    for d in 1..=50 {
        let size = d * (d + 1) / 2;
        let mut seen = vec![false; size + 1];
        for i in 1..=d {
            for j in i..=d {
                let idx = sigma_index(d, i, j).unwrap();
                sigma_ok &= (1..=size).contains(&idx)
                    && !seen[idx]
                    && sigma_inverse(d, idx).unwrap() == (i, j);
                seen[idx] = true;
            }
        }
        sigma_ok &= seen[1..].iter().all(|s| *s);
    }

    let mut w1_sym_ok = true;
    for _ in 0..100 {
        let d = rng.random_range(1..5);
        let b = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let lam = &b * b.transpose();
        let fourth: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..9.0)).collect();
        let w = noise_matrix_w1(&lam, &fourth).unwrap();
        w1_sym_ok &= (&w - w.transpose()).amax() <= 1e-12 * w.amax();
    }
    let lam1 = 0.37;
    let w = noise_matrix_w1(&DMatrix::from_element(1, 1, lam1), &[3.0]).unwrap();
    let gauss_ok = rel_err(w[(0, 0)], 3.0 * lam1 * lam1) < 1e-14;

    let mut temper_ok = true;
    let ou = builtin_model("ou-1d").unwrap();
    for _ in 0..50 {
        let series = random_series(&mut rng, 1, 30);
        let lam = DMatrix::from_element(1, 1, 1e-3);
        let eff = EffectiveDiffusion {
            mode: EffectiveMode::Stage3,
            tau: 2.0,
            delta: series.delta(),
        };
        let c = Contrast::w1(&ou, &series, &lam, eff, 30).unwrap();
        let grid: Vec<f64> = (0..200).map(|i| 0.01 + 0.05 * i as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|a| c.value(&[*a]).unwrap()).collect();
        let sched = BlockSchedule {
            tau: 2.0,
            p: 10,
            delta: series.delta(),
            k: 30,
            k_reduced: rng.random_range(3..5000),
            t_reduced: 1.0,
        };
        let factor = alpha_tempering(&sched, rng.random_range(0.01..0.5));
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, x)| if *x > b.1 { (i, *x) } else { b },
                )
                .0
        };
        let tempered: Vec<f64> = vals.iter().map(|v| factor * v).collect();
        temper_ok &= argmax(&vals) == argmax(&tempered);
    }

    let mut lm_err = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..4);
        let p = rng.random_range(1..20);
        let k = rng.random_range(3..30);
        let n = p * k - 1 + rng.random_range(0..p);
        let sched = BlockSchedule {
            tau: 2.0,
            p,
            delta: p as f64 * 1e-3,
            k,
            k_reduced: k,
            t_reduced: k as f64 * p as f64 * 1e-3,
        };
        let c: f64 = rng.random_range(-100.0..100.0);
        let konst = NoisyObservations::new(vec![c; (n + 1) * d], d, 1e-3).unwrap();
        for v in local_means(&konst, &sched).unwrap().values() {
            lm_err = lm_err.max(rel_err(*v, c));
        }
        let u: Vec<f64> = (0..(n + 1) * d)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let v: Vec<f64> = (0..(n + 1) * d)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lu = local_means(&NoisyObservations::new(u, d, 1e-3).unwrap(), &sched).unwrap();
        let lv = local_means(&NoisyObservations::new(v, d, 1e-3).unwrap(), &sched).unwrap();
        let lw = local_means(&NoisyObservations::new(w, d, 1e-3).unwrap(), &sched).unwrap();
        for ((x, y), z) in lu.values().iter().zip(lv.values()).zip(lw.values()) {
            let expect = a * x + b * y;
            lm_err = lm_err
                .max((z - expect).abs() / (a.abs() * x.abs() + b.abs() * y.abs()).max(1e-300));
        }
    }
    let lm_ok = lm_err < 1e-12;

    check(
        contrasts_ok && psd_ok && sigma_ok && w1_sym_ok && gauss_ok && temper_ok && lm_ok,
        format!(
            "max W1/W2 = {max_contrast:.3e} (≤ 0): {contrasts_ok}; min eig(Λ̂)/scale = {min_eig:.1e}: {psd_ok}; σ bijection d ≤ 50: {sigma_ok}; W₁ symmetric: {w1_sym_ok}, 3λ²: {gauss_ok}; tempering argmax: {temper_ok}; local means rel err {lm_err:.1e}: {lm_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let wanted = |i: usize| only.is_none_or(|o| o == i);
    let mut failed = 0;
    let mut run = |i: usize, name: &str, f: &dyn Fn() -> Check| {
        if !wanted(i) {
            return;
        }
        let t = Instant::now();
        let c = f();
        println!(
            "criterion {i} [{name}]: {} ({}; {:.1} s)",
            if c.pass { "PASS" } else { "FAIL" },
            c.detail,
            t.elapsed().as_secs_f64()
        );
        if !c.pass {
            failed += 1;
        }
    };
    run(1, "J-formula exactness", &c1_newton_step_counts);
    run(2, "noise-variance recovery", &c2_noise_variance);
    run(3, "closed-form oracles", &c3_closed_forms);
    run(4, "derivative correctness", &c4_derivatives);
    run(5, "MCMC correctness", &c5_mcmc);
    run(6, "desk-scale OU hybrid recovery", &c6_ou_recovery);
    if wanted(7) || wanted(8) {
        let (report, seconds) = desk_report();
        run(7, "hybrid ≈ ML agreement", &|| {
            c7_hybrid_matches_ml(&report, seconds)
        });
        run(8, "initializer sensitivity", &|| {
            c8_initializer_sensitivity(&report)
        });
    }
    run(9, "property suites", &c9_properties);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
