//! Quasi-likelihood contrasts on local-mean series.
//!
//! * `W1(α | Λ)`: least-squares contrast matching `Δ⁻¹ (ȳ_{j+1} - ȳ_j)^{⊗2}`
//!   to `(2/3) A_eff(ȳ_{j-1}, α, Λ)`.
//! * `W2(β)`: least-squares drift contrast.
//! * `H1(α | Λ)`: Gaussian quasi-log-likelihood of the local-mean increments
//!   with covariance `(2/3) Δ A_eff`.
//! * `H2(β | α)`: Gaussian drift quasi-log-likelihood weighted by `(Δ A)⁻¹`.
//!
//! Each sum runs over `j = 1 ..= k_used - 2`. Gradients and Hessians use the
//! model's analytic parameter derivatives when present and central finite
//! differences otherwise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum};
use crate::model::{self, ModelSpec, ParamSpace};
use crate::preprocess::LocalMeanSeries;
use crate::schedule::BlockSchedule;

/// How the noise covariance enters the effective diffusion `A + c Λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectiveMode {
    /// `c = 3` when `τ = 2`, else `0`.
    Limit,
    /// `c = 3 Δ^{(2-τ)/(τ-1)}` (`c = 3` at `τ = 2`).
    #[default]
    Stage3,
    /// `c = 0`.
    NoiseFree,
}

/// The map `(x, α, Λ) ↦ A(x, α) + c Λ` for one block geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDiffusion {
    pub mode: EffectiveMode,
    pub tau: f64,
    pub delta: f64,
}

impl EffectiveDiffusion {
    pub fn new(mode: EffectiveMode, sched: &BlockSchedule) -> Self {
        Self {
            mode,
            tau: sched.tau,
            delta: sched.delta,
        }
    }

    /// Coefficient `c` multiplying `Λ`.
    pub fn noise_factor(&self) -> f64 {
        match self.mode {
            EffectiveMode::NoiseFree => 0.0,
            EffectiveMode::Limit => {
                if self.tau == 2.0 {
                    3.0
                } else {
                    0.0
                }
            }
            EffectiveMode::Stage3 => {
                if self.tau == 2.0 {
                    3.0
                } else {
                    3.0 * self.delta.powf((2.0 - self.tau) / (self.tau - 1.0))
                }
            }
        }
    }

    pub fn eval(
        &self,
        model: &ModelSpec,
        x: &[f64],
        alpha: &[f64],
        lambda: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        Ok(model.eval_a(x, alpha)? + lambda * self.noise_factor())
    }
}

/// Which contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    W1,
    W2,
    H1Full,
    H2Full,
}

/// Value with optional gradient and Hessian in the active parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastValue {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

/// Highest derivative order requested from [`Contrast::evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Derivative engine selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeEngine {
    /// Analytic chain rule when the model supplies derivatives.
    #[default]
    Auto,
    /// Central differences of the scalar objective.
    FiniteDifference,
}

const FD_GRAD_STEP: f64 = 1e-6;
const FD_HESS_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
enum Kind {
    W1 {
        lambda: Vec<f64>,
        noise: f64,
    },
    W2,
    H1 {
        lambda: Vec<f64>,
        noise: f64,
    },
    /// Cholesky factors of `A(ȳ_{j-1}, α)` for `j = 1 ..= k_used - 2`.
    H2 {
        alpha: Vec<f64>,
        chol: Vec<f64>,
    },
}

/// One contrast bound to a model, a local-mean series and the fixed
/// parameters of the other block.
#[derive(Debug, Clone)]
pub struct Contrast<'a> {
    model: &'a ModelSpec,
    series: &'a LocalMeanSeries,
    k_used: usize,
    kind: Kind,
    space: Option<&'a ParamSpace>,
}

fn check_k(series: &LocalMeanSeries, k_used: usize) -> Result<()> {
    if k_used > series.len() {
        return Err(Error::shape(format!(
            "k_used={k_used} exceeds the {} available local means",
            series.len()
        )));
    }
    if k_used < 3 {
        return Err(Error::InsufficientBlocks { blocks: k_used });
    }
    Ok(())
}

fn lambda_flat(model: &ModelSpec, lambda: &DMatrix<f64>) -> Result<Vec<f64>> {
    if lambda.nrows() != model.d || lambda.ncols() != model.d {
        return Err(Error::shape(format!(
            "Λ is {}x{}, model dimension is {}",
            lambda.nrows(),
            lambda.ncols(),
            model.d
        )));
    }
    let mut out = vec![0.0; model.d * model.d];
    for i in 0..model.d {
        for j in 0..model.d {
            out[i * model.d + j] = 0.5 * (lambda[(i, j)] + lambda[(j, i)]);
        }
    }
    Ok(out)
}

fn check_series(model: &ModelSpec, series: &LocalMeanSeries) -> Result<()> {
    if series.d() != model.d {
        return Err(Error::shape(format!(
            "series dimension {} differs from model dimension {}",
            series.d(),
            model.d
        )));
    }
    Ok(())
}

impl<'a> Contrast<'a> {
    /// `W1(α | Λ)` over the first `k_used` local means.
    pub fn w1(
        model: &'a ModelSpec,
        series: &'a LocalMeanSeries,
        lambda: &DMatrix<f64>,
        eff: EffectiveDiffusion,
        k_used: usize,
    ) -> Result<Self> {
        check_series(model, series)?;
        check_k(series, k_used)?;
        Ok(Self {
            model,
            series,
            k_used,
            kind: Kind::W1 {
                lambda: lambda_flat(model, lambda)?,
                noise: eff.noise_factor(),
            },
            space: None,
        })
    }

    /// `W2(β)` over the first `k_used` local means.
    pub fn w2(model: &'a ModelSpec, series: &'a LocalMeanSeries, k_used: usize) -> Result<Self> {
        check_series(model, series)?;
        check_k(series, k_used)?;
        Ok(Self {
            model,
            series,
            k_used,
            kind: Kind::W2,
            space: None,
        })
    }

    /// Full-data `H1(α | Λ)`.
    pub fn h1_full(
        model: &'a ModelSpec,
        series: &'a LocalMeanSeries,
        lambda: &DMatrix<f64>,
        eff: EffectiveDiffusion,
    ) -> Result<Self> {
        check_series(model, series)?;
        let k_used = series.len();
        check_k(series, k_used)?;
        Ok(Self {
            model,
            series,
            k_used,
            kind: Kind::H1 {
                lambda: lambda_flat(model, lambda)?,
                noise: eff.noise_factor(),
            },
            space: None,
        })
    }

    /// Full-data `H2(β | α)`. Factorizes `A(ȳ_{j-1}, α)` for every block up
    /// front.
    pub fn h2_full(
        model: &'a ModelSpec,
        series: &'a LocalMeanSeries,
        alpha: &[f64],
    ) -> Result<Self> {
        check_series(model, series)?;
        let k_used = series.len();
        check_k(series, k_used)?;
        if alpha.len() != model.m1 {
            return Err(Error::shape(format!(
                "alpha has length {}, model expects {}",
                alpha.len(),
                model.m1
            )));
        }
        let d = model.d;
        let mut chol = vec![0.0; (k_used - 2) * d * d];
        let mut scratch = vec![0.0; d * model.r];
        for j in 1..=k_used - 2 {
            let x = series.row(j - 1);
            let slot = &mut chol[(j - 1) * d * d..j * d * d];
            if !model.a_matrix_into(x, alpha, &mut scratch, slot) {
                return Err(Error::ModelEval {
                    x: x.to_vec(),
                    theta: alpha.to_vec(),
                });
            }
            if !linalg::cholesky_in_place(slot, d) {
                return Err(Error::NonPdDiffusion {
                    block: j,
                    alpha: alpha.to_vec(),
                });
            }
        }
        Ok(Self {
            model,
            series,
            k_used,
            kind: Kind::H2 {
                alpha: alpha.to_vec(),
                chol,
            },
            space: None,
        })
    }

    /// Restricts finite-difference stencils to `space`.
    pub fn with_space(mut self, space: &'a ParamSpace) -> Self {
        self.space = Some(space);
        self
    }

    pub fn objective(&self) -> Objective {
        match self.kind {
            Kind::W1 { .. } => Objective::W1,
            Kind::W2 => Objective::W2,
            Kind::H1 { .. } => Objective::H1Full,
            Kind::H2 { .. } => Objective::H2Full,
        }
    }

    /// Dimension of the active parameter block.
    pub fn dim(&self) -> usize {
        match self.kind {
            Kind::W1 { .. } | Kind::H1 { .. } => self.model.m1,
            Kind::W2 | Kind::H2 { .. } => self.model.m2,
        }
    }

    pub fn k_used(&self) -> usize {
        self.k_used
    }

    pub fn series(&self) -> &LocalMeanSeries {
        self.series
    }

    /// The fixed `α` of an `H2` contrast.
    pub fn conditioning_alpha(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::H2 { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    fn is_alpha_block(&self) -> bool {
        matches!(self.kind, Kind::W1 { .. } | Kind::H1 { .. })
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::shape(format!(
                "parameter has length {}, contrast expects {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        Ok(self.analytic(theta, Order::Value)?.value)
    }

    /// Value plus derivatives up to `order`.
    pub fn evaluate(
        &self,
        theta: &[f64],
        order: Order,
        engine: DerivativeEngine,
    ) -> Result<ContrastValue> {
        self.check_theta(theta)?;
        let (has_first, has_second) = if self.is_alpha_block() {
            (
                self.model.has_analytic_alpha_derivatives(),
                self.model.has_analytic_alpha_hessian(),
            )
        } else {
            (
                self.model.has_analytic_beta_derivatives(),
                self.model.has_analytic_beta_hessian(),
            )
        };
        let engine_analytic = engine == DerivativeEngine::Auto;
        match order {
            Order::Value => self.analytic(theta, Order::Value),
            Order::Gradient if engine_analytic && has_first => {
                self.analytic(theta, Order::Gradient)
            }
            Order::Gradient => {
                let value = self.analytic(theta, Order::Value)?.value;
                Ok(ContrastValue {
                    value,
                    gradient: Some(self.fd_gradient(theta)?),
                    hessian: None,
                })
            }
            Order::Hessian if engine_analytic && has_second => self.analytic(theta, Order::Hessian),
            Order::Hessian if engine_analytic && has_first => {
                let mut out = self.analytic(theta, Order::Gradient)?;
                out.hessian = Some(self.fd_hessian_of_gradient(theta)?);
                Ok(out)
            }
            Order::Hessian => {
                let value = self.analytic(theta, Order::Value)?.value;
                Ok(ContrastValue {
                    value,
                    gradient: Some(self.fd_gradient(theta)?),
                    hessian: Some(self.fd_hessian(theta)?),
                })
            }
        }
    }

    fn fd_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let m = theta.len();
        let mut g = vec![0.0; m];
        let mut t = theta.to_vec();
        for i in 0..m {
            let (lo, hi) = model::stencil(theta[i], i, FD_GRAD_STEP, self.space);
            t[i] = theta[i] + hi;
            let fp = self.value(&t)?;
            t[i] = theta[i] + lo;
            let fm = self.value(&t)?;
            t[i] = theta[i];
            g[i] = (fp - fm) / (hi - lo);
        }
        Ok(g)
    }

    /// Step and shifted center per coordinate so that `center ± step` stays
    /// inside the box.
    fn hessian_stencil(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let steps: Vec<f64> = theta
            .iter()
            .map(|t| FD_HESS_STEP * (1.0 + t.abs()))
            .collect();
        let center = theta
            .iter()
            .enumerate()
            .map(|(i, t)| match self.space {
                Some(s) if t - steps[i] < s.lower[i] => s.lower[i] + steps[i],
                Some(s) if t + steps[i] > s.upper[i] => s.upper[i] - steps[i],
                _ => *t,
            })
            .collect();
        (steps, center)
    }

    fn fd_hessian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let m = theta.len();
        let (h, c) = self.hessian_stencil(theta);
        let f0 = self.value(&c)?;
        let mut hess = DMatrix::zeros(m, m);
        let mut t = c.clone();
        for i in 0..m {
            t[i] = c[i] + h[i];
            let fp = self.value(&t)?;
            t[i] = c[i] - h[i];
            let fm = self.value(&t)?;
            t[i] = c[i];
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
            for j in 0..i {
                let mut corner = |si: f64, sj: f64| -> Result<f64> {
                    t[i] = c[i] + si * h[i];
                    t[j] = c[j] + sj * h[j];
                    let v = self.value(&t);
                    t[i] = c[i];
                    t[j] = c[j];
                    v
                };
                let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                    + corner(-1.0, -1.0)?)
                    / (4.0 * h[i] * h[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        Ok(hess)
    }

    fn fd_hessian_of_gradient(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let m = theta.len();
        let (h, c) = self.hessian_stencil(theta);
        let mut hess = DMatrix::zeros(m, m);
        let mut t = c.clone();
        for i in 0..m {
            t[i] = c[i] + h[i];
            let gp = self.analytic(&t, Order::Gradient)?.gradient.unwrap();
            t[i] = c[i] - h[i];
            let gm = self.analytic(&t, Order::Gradient)?.gradient.unwrap();
            t[i] = c[i];
            for j in 0..m {
                hess[(i, j)] = (gp[j] - gm[j]) / (2.0 * h[i]);
            }
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }

    /// Per-block accumulation with the analytic chain rule. With
    /// `Order::Value` no model derivatives are touched.
    fn analytic(&self, theta: &[f64], order: Order) -> Result<ContrastValue> {
        let d = self.model.d;
        let m = self.dim();
        let want_g = order >= Order::Gradient;
        let want_h = order >= Order::Hessian;
        let mut ws = Workspace::new(d, self.model.r, m, want_g, want_h);
        let mut value = CompensatedSum::new();
        let mut grad = vec![CompensatedSum::new(); if want_g { m } else { 0 }];
        let mut hess = vec![CompensatedSum::new(); if want_h { m * m } else { 0 }];
        let delta = self.series.delta();
        for j in 1..=self.k_used - 2 {
            let prev = self.series.row(j - 1);
            let cur = self.series.row(j);
            let next = self.series.row(j + 1);
            for c in 0..d {
                ws.v[c] = next[c] - cur[c];
            }
            match &self.kind {
                Kind::W1 { lambda, noise } => self.w1_block(
                    j, prev, theta, lambda, *noise, delta, &mut ws, &mut value, &mut grad,
                    &mut hess,
                )?,
                Kind::W2 => self.w2_block(
                    prev, theta, delta, &mut ws, &mut value, &mut grad, &mut hess,
                )?,
                Kind::H1 { lambda, noise } => self.h1_block(
                    j, prev, theta, lambda, *noise, delta, &mut ws, &mut value, &mut grad,
                    &mut hess,
                )?,
                Kind::H2 { chol, .. } => {
                    let l = &chol[(j - 1) * d * d..j * d * d];
                    self.h2_block(
                        prev, theta, l, delta, &mut ws, &mut value, &mut grad, &mut hess,
                    )?
                }
            }
        }
        Ok(ContrastValue {
            value: value.value(),
            gradient: want_g.then(|| grad.iter().map(|g| g.value()).collect()),
            hessian: want_h.then(|| {
                let h = DMatrix::from_fn(m, m, |i, k| hess[i * m + k].value());
                (&h + h.transpose()) * 0.5
            }),
        })
    }

    fn diffusion_derivatives(&self, x: &[f64], alpha: &[f64], ws: &mut Workspace) -> Result<()> {
        if !ws.dparam.is_empty() && !self.model.da_dalpha_into(x, alpha, &mut ws.dparam) {
            return Err(Error::config("model supplies no analytic ∂_α A"));
        }
        if !ws.d2param.is_empty() && !self.model.d2a_dalpha2_into(x, alpha, &mut ws.d2param) {
            return Err(Error::config("model supplies no analytic ∂²_α A"));
        }
        Ok(())
    }

    fn drift_derivatives(&self, x: &[f64], beta: &[f64], ws: &mut Workspace) -> Result<()> {
        if !ws.dparam.is_empty() && !self.model.db_dbeta_into(x, beta, &mut ws.dparam) {
            return Err(Error::config("model supplies no analytic ∂_β b"));
        }
        if !ws.d2param.is_empty() && !self.model.d2b_dbeta2_into(x, beta, &mut ws.d2param) {
            return Err(Error::config("model supplies no analytic ∂²_β b"));
        }
        Ok(())
    }

    fn effective_a(
        &self,
        x: &[f64],
        alpha: &[f64],
        lambda: &[f64],
        noise: f64,
        ws: &mut Workspace,
    ) -> Result<()> {
        if !self
            .model
            .a_matrix_into(x, alpha, &mut ws.a_coef, &mut ws.s)
        {
            return Err(Error::ModelEval {
                x: x.to_vec(),
                theta: alpha.to_vec(),
            });
        }
        if noise != 0.0 {
            for (s, l) in ws.s.iter_mut().zip(lambda) {
                *s += noise * l;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn w1_block(
        &self,
        _j: usize,
        x: &[f64],
        alpha: &[f64],
        lambda: &[f64],
        noise: f64,
        delta: f64,
        ws: &mut Workspace,
        value: &mut CompensatedSum,
        grad: &mut [CompensatedSum],
        hess: &mut [CompensatedSum],
    ) -> Result<()> {
        let d = self.model.d;
        let m = self.model.m1;
        self.effective_a(x, alpha, lambda, noise, ws)?;
        // R = Δ⁻¹ v vᵀ - (2/3) S
        let mut sq = 0.0;
        for r in 0..d {
            for c in 0..d {
                let e = ws.v[r] * ws.v[c] / delta - (2.0 / 3.0) * ws.s[r * d + c];
                ws.res[r * d + c] = e;
                sq += e * e;
            }
        }
        value.add(-0.5 * sq);
        if grad.is_empty() {
            return Ok(());
        }
        self.diffusion_derivatives(x, alpha, ws)?;
        let dd = d * d;
        for i in 0..m {
            let ai = &ws.dparam[i * dd..(i + 1) * dd];
            let inner: f64 = ws.res.iter().zip(ai).map(|(r, a)| r * a).sum();
            grad[i].add((2.0 / 3.0) * inner);
        }
        if hess.is_empty() {
            return Ok(());
        }
        for i in 0..m {
            let ai = &ws.dparam[i * dd..(i + 1) * dd];
            for k in 0..m {
                let ak = &ws.dparam[k * dd..(k + 1) * dd];
                let aik = &ws.d2param[(i * m + k) * dd..(i * m + k + 1) * dd];
                let r_aik: f64 = ws.res.iter().zip(aik).map(|(r, a)| r * a).sum();
                let ai_ak: f64 = ai.iter().zip(ak).map(|(a, b)| a * b).sum();
                hess[i * m + k].add((2.0 / 3.0) * r_aik - (4.0 / 9.0) * ai_ak);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn w2_block(
        &self,
        x: &[f64],
        beta: &[f64],
        delta: f64,
        ws: &mut Workspace,
        value: &mut CompensatedSum,
        grad: &mut [CompensatedSum],
        hess: &mut [CompensatedSum],
    ) -> Result<()> {
        let d = self.model.d;
        let m = self.model.m2;
        if !self.model.drift_into(x, beta, &mut ws.b) {
            return Err(Error::ModelEval {
                x: x.to_vec(),
                theta: beta.to_vec(),
            });
        }
        let mut sq = 0.0;
        for c in 0..d {
            let r = ws.v[c] - delta * ws.b[c];
            ws.g[c] = r;
            sq += r * r;
        }
        value.add(-0.5 * sq / delta);
        if grad.is_empty() {
            return Ok(());
        }
        self.drift_derivatives(x, beta, ws)?;
        for i in 0..m {
            let bi = &ws.dparam[i * d..(i + 1) * d];
            grad[i].add(bi.iter().zip(&ws.g).map(|(a, b)| a * b).sum());
        }
        if hess.is_empty() {
            return Ok(());
        }
        for i in 0..m {
            let bi = &ws.dparam[i * d..(i + 1) * d];
            for k in 0..m {
                let bk = &ws.dparam[k * d..(k + 1) * d];
                let bik = &ws.d2param[(i * m + k) * d..(i * m + k + 1) * d];
                let first: f64 = bik.iter().zip(&ws.g).map(|(a, b)| a * b).sum();
                let second: f64 = bi.iter().zip(bk).map(|(a, b)| a * b).sum();
                hess[i * m + k].add(first - delta * second);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn h1_block(
        &self,
        j: usize,
        x: &[f64],
        alpha: &[f64],
        lambda: &[f64],
        noise: f64,
        delta: f64,
        ws: &mut Workspace,
        value: &mut CompensatedSum,
        grad: &mut [CompensatedSum],
        hess: &mut [CompensatedSum],
    ) -> Result<()> {
        let d = self.model.d;
        let m = self.model.m1;
        self.effective_a(x, alpha, lambda, noise, ws)?;
        ws.l.copy_from_slice(&ws.s);
        if !linalg::cholesky_in_place(&mut ws.l, d) {
            return Err(Error::NonPdDiffusion {
                block: j,
                alpha: alpha.to_vec(),
            });
        }
        ws.g.copy_from_slice(&ws.v);
        linalg::cholesky_solve(&ws.l, d, &mut ws.g);
        let quad: f64 = ws.v.iter().zip(&ws.g).map(|(a, b)| a * b).sum();
        let logdet = linalg::cholesky_logdet(&ws.l, d);
        let c = 1.5 / delta;
        value.add(-0.5 * (c * quad + logdet));
        if grad.is_empty() {
            return Ok(());
        }
        self.diffusion_derivatives(x, alpha, ws)?;
        linalg::cholesky_inverse(&ws.l, d, &mut ws.sinv, &mut ws.col);
        let dd = d * d;
        for i in 0..m {
            let ai = &ws.dparam[i * dd..(i + 1) * dd];
            // u_i = A_i g, P_i = S⁻¹ A_i
            let u = &mut ws.u[i * d..(i + 1) * d];
            for r in 0..d {
                u[r] = (0..d).map(|k| ai[r * d + k] * ws.g[k]).sum();
            }
            let g_ai_g: f64 = ws.g.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            linalg::matmul(&ws.sinv, ai, d, &mut ws.p[i * dd..(i + 1) * dd]);
            let tr: f64 = (0..d).map(|r| ws.p[i * dd + r * d + r]).sum();
            grad[i].add(-0.5 * (-c * g_ai_g + tr));
        }
        if hess.is_empty() {
            return Ok(());
        }
        for i in 0..m {
            // w_i = S⁻¹ u_i
            for r in 0..d {
                ws.w[i * d + r] = (0..d).map(|k| ws.sinv[r * d + k] * ws.u[i * d + k]).sum();
            }
        }
        for i in 0..m {
            for k in 0..m {
                let aik = &ws.d2param[(i * m + k) * dd..(i * m + k + 1) * dd];
                let ui_wk: f64 = (0..d).map(|r| ws.u[i * d + r] * ws.w[k * d + r]).sum();
                let mut g_aik_g = 0.0;
                for r in 0..d {
                    for s in 0..d {
                        g_aik_g += ws.g[r] * aik[r * d + s] * ws.g[s];
                    }
                }
                let tr_sinv_aik = linalg::trace_product(&ws.sinv, aik, d);
                let tr_pp = linalg::trace_product(
                    &ws.p[i * dd..(i + 1) * dd],
                    &ws.p[k * dd..(k + 1) * dd],
                    d,
                );
                hess[i * m + k].add(-0.5 * (c * (2.0 * ui_wk - g_aik_g) + tr_sinv_aik - tr_pp));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn h2_block(
        &self,
        x: &[f64],
        beta: &[f64],
        l: &[f64],
        delta: f64,
        ws: &mut Workspace,
        value: &mut CompensatedSum,
        grad: &mut [CompensatedSum],
        hess: &mut [CompensatedSum],
    ) -> Result<()> {
        let d = self.model.d;
        let m = self.model.m2;
        if !self.model.drift_into(x, beta, &mut ws.b) {
            return Err(Error::ModelEval {
                x: x.to_vec(),
                theta: beta.to_vec(),
            });
        }
        // residual r and A⁻¹ r
        for c in 0..d {
            ws.res[c] = ws.v[c] - delta * ws.b[c];
        }
        ws.g.copy_from_slice(&ws.res[..d]);
        linalg::cholesky_solve(l, d, &mut ws.g);
        let quad: f64 = (0..d).map(|c| ws.res[c] * ws.g[c]).sum();
        value.add(-0.5 * quad / delta);
        if grad.is_empty() {
            return Ok(());
        }
        self.drift_derivatives(x, beta, ws)?;
        for i in 0..m {
            let bi = &ws.dparam[i * d..(i + 1) * d];
            grad[i].add(bi.iter().zip(&ws.g).map(|(a, b)| a * b).sum());
        }
        if hess.is_empty() {
            return Ok(());
        }
        // A⁻¹ b_k
        for k in 0..m {
            let dst = &mut ws.u[k * d..(k + 1) * d];
            dst.copy_from_slice(&ws.dparam[k * d..(k + 1) * d]);
            linalg::cholesky_solve(l, d, dst);
        }
        for i in 0..m {
            let bi = &ws.dparam[i * d..(i + 1) * d];
            for k in 0..m {
                let bik = &ws.d2param[(i * m + k) * d..(i * m + k + 1) * d];
                let first: f64 = bik.iter().zip(&ws.g).map(|(a, b)| a * b).sum();
                let second: f64 = bi
                    .iter()
                    .zip(&ws.u[k * d..(k + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                hess[i * m + k].add(first - delta * second);
            }
        }
        Ok(())
    }
}

/// Per-evaluation scratch buffers.
struct Workspace {
    v: Vec<f64>,
    g: Vec<f64>,
    b: Vec<f64>,
    col: Vec<f64>,
    a_coef: Vec<f64>,
    s: Vec<f64>,
    l: Vec<f64>,
    sinv: Vec<f64>,
    res: Vec<f64>,
    dparam: Vec<f64>,
    d2param: Vec<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
    p: Vec<f64>,
}

impl Workspace {
    fn new(d: usize, r: usize, m: usize, grad: bool, hess: bool) -> Self {
        let dd = d * d;
        // derivative slabs are sized for the larger of the two layouts
        let first = if grad { m * dd.max(d) } else { 0 };
        let second = if hess { m * m * dd.max(d) } else { 0 };
        Self {
            v: vec![0.0; d],
            g: vec![0.0; d],
            b: vec![0.0; d],
            col: vec![0.0; d],
            a_coef: vec![0.0; d * r],
            s: vec![0.0; dd],
            l: vec![0.0; dd],
            sinv: vec![0.0; dd],
            res: vec![0.0; dd],
            dparam: vec![0.0; first],
            d2param: vec![0.0; second],
            u: vec![0.0; m * d],
            w: vec![0.0; m * d],
            p: vec![0.0; if grad { m * dd } else { 0 }],
        }
    }
}

/// `k_reduced^{-(1 - 2 q1)}`.
pub fn alpha_tempering(sched: &BlockSchedule, q1: f64) -> f64 {
    (sched.k_reduced as f64).powf(-(1.0 - 2.0 * q1))
}

/// `T_reduced^{-(1 - 2 q2)}`.
pub fn beta_tempering(sched: &BlockSchedule, q2: f64) -> f64 {
    sched.t_reduced.powf(-(1.0 - 2.0 * q2))
}

pub fn w1(
    model: &ModelSpec,
    alpha: &[f64],
    lambda: &DMatrix<f64>,
    series: &LocalMeanSeries,
    k_used: usize,
    mode: EffectiveMode,
) -> Result<f64> {
    let eff = EffectiveDiffusion::new(mode, &series.schedule);
    Contrast::w1(model, series, lambda, eff, k_used)?.value(alpha)
}

pub fn w2(model: &ModelSpec, beta: &[f64], series: &LocalMeanSeries, k_used: usize) -> Result<f64> {
    Contrast::w2(model, series, k_used)?.value(beta)
}

/// Tempered initial-stage diffusion contrast on the reduced data.
pub fn h1_tempered(
    model: &ModelSpec,
    alpha: &[f64],
    lambda: &DMatrix<f64>,
    series: &LocalMeanSeries,
    q1: f64,
    mode: EffectiveMode,
) -> Result<f64> {
    let sched = series.schedule;
    Ok(alpha_tempering(&sched, q1) * w1(model, alpha, lambda, series, sched.k_reduced, mode)?)
}

/// Tempered initial-stage drift contrast on the reduced data.
pub fn h2_tempered(
    model: &ModelSpec,
    beta: &[f64],
    series: &LocalMeanSeries,
    q2: f64,
) -> Result<f64> {
    let sched = series.schedule;
    Ok(beta_tempering(&sched, q2) * w2(model, beta, series, sched.k_reduced)?)
}

pub fn h1_full(
    model: &ModelSpec,
    alpha: &[f64],
    lambda: &DMatrix<f64>,
    series: &LocalMeanSeries,
    mode: EffectiveMode,
) -> Result<f64> {
    let eff = EffectiveDiffusion::new(mode, &series.schedule);
    Contrast::h1_full(model, series, lambda, eff)?.value(alpha)
}

pub fn h2_full(
    model: &ModelSpec,
    beta: &[f64],
    alpha: &[f64],
    series: &LocalMeanSeries,
) -> Result<f64> {
    Contrast::h2_full(model, series, alpha)?.value(beta)
}

/// Gradient and Hessian of a bound contrast at `theta`.
pub fn contrast_derivatives(
    contrast: &Contrast<'_>,
    theta: &[f64],
    engine: DerivativeEngine,
) -> Result<ContrastValue> {
    contrast.evaluate(theta, Order::Hessian, engine)
}
