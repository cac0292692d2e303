//! Box-constrained quasi-Newton maximization and the adaptive ML estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contrasts::{Contrast, DerivativeEngine, EffectiveDiffusion, Order};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamSpace, ParamSpaces};
use crate::multistep::full_h1_mode;
use crate::preprocess::{estimate_noise_variance, local_means, NoisyObservations};
use crate::schedule::{make_schedule, TuningConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximizeOptions {
    pub max_iter: usize,
    /// Stop when `max_i |∂_i f| (1 + |θ_i|) / normalizer` over free
    /// coordinates falls below this.
    pub tol: f64,
    /// Objective scale used in the stopping rule.
    pub normalizer: f64,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            normalizer: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximizeResult {
    pub theta: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Coordinates pinned at a face with the gradient pointing outward.
fn active_set(theta: &[f64], grad: &[f64], space: &ParamSpace) -> Vec<bool> {
    theta
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (*t <= space.lower[i] && grad[i] < 0.0) || (*t >= space.upper[i] && grad[i] > 0.0)
        })
        .collect()
}

fn stationarity(theta: &[f64], grad: &[f64], active: &[bool], normalizer: f64) -> f64 {
    (0..theta.len())
        .filter(|&i| !active[i])
        .map(|i| grad[i].abs() * (1.0 + theta[i].abs()) / normalizer)
        .fold(0.0, f64::max)
}

/// Initial inverse-curvature estimate: `(-∇²f)⁻¹` when positive definite,
/// else a scaled identity.
fn initial_inverse(hess: Option<&DMatrix<f64>>, grad: &[f64], m: usize) -> DMatrix<f64> {
    if let Some(h) = hess {
        let neg = -h;
        if let Some(ch) = neg.cholesky() {
            return ch.inverse();
        }
    }
    let g = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    DMatrix::identity(m, m) * if g > 0.0 { 1.0 / g } else { 1.0 }
}

/// Maximizes `contrast` over `space` from `theta0` by projected BFGS ascent
/// with a backtracking line search along the projected path.
pub fn maximize_contrast(
    contrast: &Contrast<'_>,
    theta0: &[f64],
    space: &ParamSpace,
    opts: &MaximizeOptions,
) -> Result<MaximizeResult> {
    let m = theta0.len();
    let (mut theta, _) = space.clamp(theta0);
    let start = contrast.evaluate(&theta, Order::Hessian, DerivativeEngine::Auto)?;
    let mut f = start.value;
    let mut grad = start.gradient.unwrap();
    let mut inv = initial_inverse(start.hessian.as_ref(), &grad, m);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let active = active_set(&theta, &grad, space);
        if stationarity(&theta, &grad, &active, opts.normalizer) < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let g = DVector::from_iterator(m, (0..m).map(|i| if active[i] { 0.0 } else { grad[i] }));
        let mut dir = &inv * &g;
        for i in 0..m {
            if active[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&g) <= 0.0 {
            inv = initial_inverse(None, &grad, m);
            dir = &inv * &g;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..m).map(|i| theta[i] + t * dir[i]).collect();
            let (trial, _) = space.clamp(&trial);
            match contrast.value(&trial) {
                Ok(v) if v.is_finite() && v >= f + 1e-4 * dot_diff(&trial, &theta, &grad) => {
                    next = Some((trial, v));
                    break;
                }
                Ok(_) | Err(Error::NonPdDiffusion { .. }) | Err(Error::ModelEval { .. }) => {
                    t *= 0.5
                }
                Err(e) => return Err(e),
            }
        }
        let Some((trial, value)) = next else {
            // no ascent along the projected path
            converged = stationarity(&theta, &grad, &active, opts.normalizer) < opts.tol.sqrt();
            break;
        };
        let eval = contrast.evaluate(&trial, Order::Gradient, DerivativeEngine::Auto)?;
        let new_grad = eval.gradient.unwrap();
        let s = DVector::from_iterator(m, (0..m).map(|i| trial[i] - theta[i]));
        // ascent on f is descent on -f: y = -(g_new - g_old)
        let y = DVector::from_iterator(m, (0..m).map(|i| grad[i] - new_grad[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(m, m);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            inv = &left * &inv * &right + &s * s.transpose() * rho;
        }
        let small_change = (value - f).abs() <= 1e-15 * f.abs().max(1.0)
            && s.amax() <= 1e-14 * (1.0 + theta.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        theta = trial;
        f = value;
        grad = new_grad;
        if small_change {
            let active = active_set(&theta, &grad, space);
            converged = stationarity(&theta, &grad, &active, opts.normalizer) < opts.tol.sqrt();
            break;
        }
    }
    Ok(MaximizeResult {
        theta,
        value: f,
        iterations,
        converged,
    })
}

fn dot_diff(a: &[f64], b: &[f64], g: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(g)
        .map(|((x, y), gi)| (x - y) * gi)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlResult {
    pub alpha: MaximizeResult,
    pub beta: MaximizeResult,
}

/// Adaptive ML: maximize the full `H1(· | Λ̂)` from `alpha0`, then the full
/// `H2(· | α̂)` from `beta0`.
pub fn ml_from_init(
    obs: &NoisyObservations,
    model: &ModelSpec,
    spaces: &ParamSpaces,
    cfg: &TuningConfig,
    alpha0: &[f64],
    beta0: &[f64],
) -> Result<MlResult> {
    let sched = make_schedule(cfg, cfg.tau3, None)?;
    let series = local_means(obs, &sched)?;
    let lambda = estimate_noise_variance(obs).lambda_hat;
    let eff = EffectiveDiffusion::new(full_h1_mode(cfg), &sched);
    let h1 = Contrast::h1_full(model, &series, &lambda, eff)?.with_space(&spaces.alpha);
    let alpha = maximize_contrast(
        &h1,
        alpha0,
        &spaces.alpha,
        &MaximizeOptions {
            normalizer: sched.k as f64,
            ..Default::default()
        },
    )?;
    let h2 = Contrast::h2_full(model, &series, &alpha.theta)?.with_space(&spaces.beta);
    let beta = maximize_contrast(
        &h2,
        beta0,
        &spaces.beta,
        &MaximizeOptions {
            normalizer: cfg.horizon(),
            ..Default::default()
        },
    )?;
    Ok(MlResult { alpha, beta })
}
