//! Multi-step Newton refinement of the initial estimators and the end-to-end
//! hybrid pipeline.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes::{initial_alpha, initial_beta, McmcConfig, PosteriorSummary};
use crate::contrasts::{Contrast, DerivativeEngine, EffectiveDiffusion, EffectiveMode, Order};
use crate::error::{Error, Result};
use crate::linalg::sym_solve;
use crate::model::{ModelSpec, ParamSpace, ParamSpaces};
use crate::preprocess::{
    estimate_noise_variance, local_means, LocalMeanSeries, NoiseVariance, NoisyObservations,
};
use crate::schedule::{compute_j1, compute_j2, make_schedule, BlockSchedule, TuningConfig};

/// Smallest reciprocal condition number for which the normalized Hessian is
/// used as the Newton preconditioner.
pub const RCOND_MIN: f64 = 1e-12;

/// Iterates of one refinement, initial point included.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NewtonTrace {
    pub iterates: Vec<Vec<f64>>,
    /// Euclidean norm of the normalized gradient at each iterate.
    pub grad_norms: Vec<f64>,
    /// Whether the step leading to each iterate used the identity in place of
    /// the normalized Hessian (false for the initial point).
    pub used_identity_fallback: Vec<bool>,
    /// Whether the step leading to each iterate was clamped into the box.
    pub clamped: Vec<bool>,
    pub objective_values: Vec<f64>,
}

impl NewtonTrace {
    pub fn last(&self) -> Option<&[f64]> {
        self.iterates.last().map(|v| v.as_slice())
    }

    pub fn steps(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }
}

/// A refinement that stopped early, with the iterates reached so far.
#[derive(Debug)]
pub struct NewtonFailure {
    pub error: Error,
    pub trace: NewtonTrace,
}

impl fmt::Display for NewtonFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} after {} Newton steps",
            self.error,
            self.trace.steps()
        )
    }
}

impl std::error::Error for NewtonFailure {}

impl From<NewtonFailure> for Error {
    fn from(f: NewtonFailure) -> Self {
        f.error
    }
}

/// `steps` iterations of `θ ← θ - J̄⁻¹ (∂H / normalizer)` with
/// `J = ∂²H / normalizer`, falling back to the identity when `J` is
/// ill-conditioned, and clamping each iterate into `space`.
pub fn newton_refine(
    contrast: &Contrast<'_>,
    theta0: &[f64],
    normalizer: f64,
    steps: usize,
    space: &ParamSpace,
    engine: DerivativeEngine,
) -> std::result::Result<NewtonTrace, NewtonFailure> {
    let mut trace = NewtonTrace::default();
    let fail = |error: Error, trace: NewtonTrace| NewtonFailure { error, trace };
    if !space.contains(theta0) {
        return Err(fail(
            Error::config("Newton start outside the parameter box"),
            trace,
        ));
    }
    let mut theta = theta0.to_vec();
    let mut fallback = false;
    let mut clamped = false;
    for step in 0..=steps {
        let order = if step < steps {
            Order::Hessian
        } else {
            Order::Gradient
        };
        let eval = match contrast.evaluate(&theta, order, engine) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, trace)),
        };
        let grad: Vec<f64> = eval
            .gradient
            .unwrap()
            .iter()
            .map(|g| g / normalizer)
            .collect();
        trace.iterates.push(theta.clone());
        trace
            .grad_norms
            .push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        trace.used_identity_fallback.push(fallback);
        trace.clamped.push(clamped);
        trace.objective_values.push(eval.value);
        if step == steps {
            break;
        }
        let info: DMatrix<f64> = eval.hessian.unwrap() / normalizer;
        let direction = match sym_solve(&info, &grad, RCOND_MIN) {
            Some(s) => {
                fallback = false;
                s.solution
            }
            None => {
                fallback = true;
                grad.clone()
            }
        };
        let next: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t - d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(fail(
                Error::Singular("non-finite Newton step".into()),
                trace,
            ));
        }
        let (next, moved) = space.clamp(&next);
        clamped = moved;
        theta = next;
    }
    Ok(trace)
}

/// Effective-diffusion mode of the full-data `H1`.
pub fn full_h1_mode(cfg: &TuningConfig) -> EffectiveMode {
    if cfg.drop_noise_in_a {
        EffectiveMode::NoiseFree
    } else {
        EffectiveMode::Stage3
    }
}

/// `J1` Newton steps on the full-data `H1(· | Λ̂)`, normalized by `k`.
pub fn newton_refine_alpha(
    model: &ModelSpec,
    alpha0: &[f64],
    lambda_hat: &DMatrix<f64>,
    series: &LocalMeanSeries,
    space: &ParamSpace,
    cfg: &TuningConfig,
    j1: usize,
) -> std::result::Result<NewtonTrace, NewtonFailure> {
    let eff = EffectiveDiffusion::new(full_h1_mode(cfg), &series.schedule);
    let contrast = Contrast::h1_full(model, series, lambda_hat, eff)
        .map_err(|error| NewtonFailure {
            error,
            trace: NewtonTrace::default(),
        })?
        .with_space(space);
    newton_refine(
        &contrast,
        alpha0,
        series.schedule.k as f64,
        j1,
        space,
        DerivativeEngine::Auto,
    )
}

/// `J2` Newton steps on the full-data `H2(· | α)`, normalized by `T = n h`.
#[allow(clippy::too_many_arguments)]
pub fn newton_refine_beta(
    model: &ModelSpec,
    beta0: &[f64],
    alpha: &[f64],
    series: &LocalMeanSeries,
    space: &ParamSpace,
    cfg: &TuningConfig,
    j2: usize,
) -> std::result::Result<NewtonTrace, NewtonFailure> {
    let contrast = Contrast::h2_full(model, series, alpha)
        .map_err(|error| NewtonFailure {
            error,
            trace: NewtonTrace::default(),
        })?
        .with_space(space);
    newton_refine(
        &contrast,
        beta0,
        cfg.horizon(),
        j2,
        space,
        DerivativeEngine::Auto,
    )
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub noise: f64,
    pub alpha_init: f64,
    pub alpha_newton: f64,
    pub beta_init: f64,
    pub beta_newton: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Setup,
    NoiseVariance,
    AlphaInit,
    AlphaNewton,
    BetaInit,
    BetaNewton,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Setup => "setup",
            Stage::NoiseVariance => "noise-variance",
            Stage::AlphaInit => "alpha-init",
            Stage::AlphaNewton => "alpha-newton",
            Stage::BetaInit => "beta-init",
            Stage::BetaNewton => "beta-newton",
        };
        f.write_str(s)
    }
}

/// Everything produced by [`hybrid_estimate`]. Stages that did not run are
/// `None` only inside a [`HybridFailure`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridResult {
    pub config: Option<TuningConfig>,
    pub j1: usize,
    pub j2: usize,
    pub schedule_alpha_init: Option<BlockSchedule>,
    pub schedule_beta_init: Option<BlockSchedule>,
    pub schedule_full: Option<BlockSchedule>,
    pub lambda_hat: Option<NoiseVariance>,
    pub alpha_init: Option<PosteriorSummary>,
    pub alpha_trace: Option<NewtonTrace>,
    pub beta_init: Option<PosteriorSummary>,
    pub beta_trace: Option<NewtonTrace>,
    pub mcmc_seeds: (u64, u64),
    pub timings: StageTimings,
}

impl HybridResult {
    /// Final diffusion-parameter iterate.
    pub fn alpha_hat(&self) -> Option<&[f64]> {
        self.alpha_trace.as_ref().and_then(|t| t.last())
    }

    /// Final drift-parameter iterate.
    pub fn beta_hat(&self) -> Option<&[f64]> {
        self.beta_trace.as_ref().and_then(|t| t.last())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug)]
pub struct HybridFailure {
    pub stage: Stage,
    pub error: Error,
    pub partial: Box<HybridResult>,
}

impl fmt::Display for HybridFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for HybridFailure {}

impl From<HybridFailure> for Error {
    fn from(f: HybridFailure) -> Self {
        f.error
    }
}

/// Noise covariance, Bayes initializers on reduced data, then `J1` and `J2`
/// Newton steps on the full data. The drift refinement conditions on the
/// final diffusion iterate.
pub fn hybrid_estimate(
    obs: &NoisyObservations,
    model: &ModelSpec,
    spaces: &ParamSpaces,
    cfg: &TuningConfig,
    mcmc_alpha: &McmcConfig,
    mcmc_beta: &McmcConfig,
) -> std::result::Result<HybridResult, HybridFailure> {
    let mut res = HybridResult {
        config: Some(cfg.clone()),
        mcmc_seeds: (mcmc_alpha.seed, mcmc_beta.seed),
        ..Default::default()
    };
    macro_rules! stage {
        ($stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    return Err(HybridFailure {
                        stage: $stage,
                        error: error.into(),
                        partial: Box::new(res),
                    })
                }
            }
        };
    }

    stage!(Stage::Setup, check_inputs(obs, model, spaces, cfg));
    res.j1 = stage!(Stage::Setup, compute_j1(cfg));
    res.j2 = stage!(Stage::Setup, compute_j2(cfg));
    let full = stage!(Stage::Setup, make_schedule(cfg, cfg.tau3, None));
    res.schedule_full = Some(full);
    res.schedule_alpha_init = Some(stage!(
        Stage::Setup,
        make_schedule(cfg, cfg.tau1, Some(cfg.eta1))
    ));
    res.schedule_beta_init = Some(stage!(
        Stage::Setup,
        make_schedule(cfg, cfg.tau2, Some(cfg.eta2))
    ));

    let t = Instant::now();
    let lambda = estimate_noise_variance(obs);
    res.timings.noise = t.elapsed().as_secs_f64();
    let lambda_hat = lambda.lambda_hat.clone();
    res.lambda_hat = Some(lambda);

    let t = Instant::now();
    let a0 = stage!(
        Stage::AlphaInit,
        initial_alpha(obs, model, &spaces.alpha, cfg, &lambda_hat, mcmc_alpha)
    );
    res.timings.alpha_init = t.elapsed().as_secs_f64();
    let alpha0 = a0.mean.clone();
    res.alpha_init = Some(a0);

    let t = Instant::now();
    let series = stage!(Stage::AlphaNewton, local_means(obs, &full));
    match newton_refine_alpha(
        model,
        &alpha0,
        &lambda_hat,
        &series,
        &spaces.alpha,
        cfg,
        res.j1,
    ) {
        Ok(trace) => res.alpha_trace = Some(trace),
        Err(f) => {
            res.alpha_trace = Some(f.trace);
            return Err(HybridFailure {
                stage: Stage::AlphaNewton,
                error: f.error,
                partial: Box::new(res),
            });
        }
    }
    res.timings.alpha_newton = t.elapsed().as_secs_f64();
    let alpha_hat = res.alpha_hat().unwrap().to_vec();

    let t = Instant::now();
    let b0 = stage!(
        Stage::BetaInit,
        initial_beta(obs, model, &spaces.beta, cfg, mcmc_beta)
    );
    res.timings.beta_init = t.elapsed().as_secs_f64();
    let beta0 = b0.mean.clone();
    res.beta_init = Some(b0);

    let t = Instant::now();
    match newton_refine_beta(
        model,
        &beta0,
        &alpha_hat,
        &series,
        &spaces.beta,
        cfg,
        res.j2,
    ) {
        Ok(trace) => res.beta_trace = Some(trace),
        Err(f) => {
            res.beta_trace = Some(f.trace);
            return Err(HybridFailure {
                stage: Stage::BetaNewton,
                error: f.error,
                partial: Box::new(res),
            });
        }
    }
    res.timings.beta_newton = t.elapsed().as_secs_f64();
    Ok(res)
}

fn check_inputs(
    obs: &NoisyObservations,
    model: &ModelSpec,
    spaces: &ParamSpaces,
    cfg: &TuningConfig,
) -> Result<()> {
    cfg.validate()?;
    if obs.d() != model.d {
        return Err(Error::shape(format!(
            "observations have dimension {}, model {}",
            obs.d(),
            model.d
        )));
    }
    if obs.n() != cfg.n {
        return Err(Error::config(format!(
            "config n={} but the data hold {} increments",
            cfg.n,
            obs.n()
        )));
    }
    if (obs.h() - cfg.h).abs() > 1e-12 * cfg.h {
        return Err(Error::config(format!(
            "config h={} but the data use h={}",
            cfg.h,
            obs.h()
        )));
    }
    if spaces.alpha.dim() != model.m1 || spaces.beta.dim() != model.m2 {
        return Err(Error::shape("parameter boxes do not match the model"));
    }
    Ok(())
}
