//! Model structure: drift `b(x, β)`, diffusion `a(x, α)`, parameter boxes and
//! derivative access.
//!
//! Model callables write into caller-provided buffers so that the per-block
//! loops in the contrasts never allocate. They must be stateless (or
//! internally synchronized): the same `ModelSpec` is evaluated from several
//! threads at once.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, theta, out)`; writes a row-major result into `out`.
pub type ModelFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Open parameter box `(lower, upper)` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::config("parameter box bounds differ in length"));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l < u) || !l.is_finite() || !u.is_finite() {
                return Err(Error::config(format!(
                    "parameter box coordinate {i}: lower {l} must be < upper {u}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval for every coordinate.
    pub fn cube(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Membership in the closed box.
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *t >= *l && *t <= *u)
    }

    /// Projects onto the closed box; the flag reports whether anything moved.
    pub fn clamp(&self, theta: &[f64]) -> (Vec<f64>, bool) {
        let mut moved = false;
        let out = theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| {
                let c = t.clamp(*l, *u);
                if c != *t {
                    moved = true;
                }
                c
            })
            .collect();
        (out, moved)
    }
}

/// Diffusion-parameter and drift-parameter boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpaces {
    pub alpha: ParamSpace,
    pub beta: ParamSpace,
}

/// Which derivative tensor to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeKind {
    /// `∂_α A`, shape `[m1, d, d]`.
    DaDalpha,
    /// `∂²_α A`, shape `[m1, m1, d, d]`.
    D2aDalpha2,
    /// `∂_β b`, shape `[m2, d]`.
    DbDbeta,
    /// `∂²_β b`, shape `[m2, m2, d]`.
    D2bDbeta2,
    /// `∂³_α A`, shape `[m1, m1, m1, d, d]`; always finite differences.
    D3aDalpha3,
    /// `∂³_β b`, shape `[m2, m2, m2, d]`; always finite differences.
    D3bDbeta3,
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, s) in idx.iter().zip(&self.shape) {
            debug_assert!(i < s);
            flat = flat * s + i;
        }
        self.data[flat]
    }
}

/// User-supplied model: dimensions, drift, diffusion and optional analytic
/// derivatives.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    /// State dimension.
    pub d: usize,
    /// Driving-noise dimension.
    pub r: usize,
    /// Diffusion-parameter dimension.
    pub m1: usize,
    /// Drift-parameter dimension.
    pub m2: usize,
    drift: ModelFn,
    diffusion: ModelFn,
    d_a_d_alpha: Option<ModelFn>,
    d2_a_d_alpha2: Option<ModelFn>,
    d_b_d_beta: Option<ModelFn>,
    d2_b_d_beta2: Option<ModelFn>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("r", &self.r)
            .field("m1", &self.m1)
            .field("m2", &self.m2)
            .field("analytic_alpha", &self.has_analytic_alpha_derivatives())
            .field("analytic_beta", &self.has_analytic_beta_derivatives())
            .finish()
    }
}

impl ModelSpec {
    /// `drift` writes `b(x, β)` (length `d`); `diffusion` writes `a(x, α)`
    /// as a row-major `d × r` matrix.
    pub fn new<B, A>(
        name: impl Into<String>,
        d: usize,
        r: usize,
        m1: usize,
        m2: usize,
        drift: B,
        diffusion: A,
    ) -> Self
    where
        B: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        A: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            d,
            r,
            m1,
            m2,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            d_a_d_alpha: None,
            d2_a_d_alpha2: None,
            d_b_d_beta: None,
            d2_b_d_beta2: None,
        }
    }

    /// Analytic `∂_α A`: writes `m1` consecutive row-major `d × d` slabs.
    pub fn with_da_dalpha<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.d_a_d_alpha = Some(Arc::new(f));
        self
    }

    /// Analytic `∂²_α A`: writes `m1 × m1` slabs of `d × d`.
    pub fn with_d2a_dalpha2<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.d2_a_d_alpha2 = Some(Arc::new(f));
        self
    }

    /// Analytic `∂_β b`: writes `m2` consecutive vectors of length `d`.
    pub fn with_db_dbeta<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.d_b_d_beta = Some(Arc::new(f));
        self
    }

    /// Analytic `∂²_β b`: writes `m2 × m2` vectors of length `d`.
    pub fn with_d2b_dbeta2<F>(mut self, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.d2_b_d_beta2 = Some(Arc::new(f));
        self
    }

    /// Drops all analytic derivatives, forcing finite differences.
    pub fn without_derivatives(mut self) -> Self {
        self.d_a_d_alpha = None;
        self.d2_a_d_alpha2 = None;
        self.d_b_d_beta = None;
        self.d2_b_d_beta2 = None;
        self
    }

    pub fn has_analytic_alpha_derivatives(&self) -> bool {
        self.d_a_d_alpha.is_some()
    }

    pub fn has_analytic_alpha_hessian(&self) -> bool {
        self.d_a_d_alpha.is_some() && self.d2_a_d_alpha2.is_some()
    }

    pub fn has_analytic_beta_derivatives(&self) -> bool {
        self.d_b_d_beta.is_some()
    }

    pub fn has_analytic_beta_hessian(&self) -> bool {
        self.d_b_d_beta.is_some() && self.d2_b_d_beta2.is_some()
    }

    /// Drift into `out` (length `d`). Returns false on non-finite output.
    #[inline]
    pub fn drift_into(&self, x: &[f64], beta: &[f64], out: &mut [f64]) -> bool {
        (self.drift)(x, beta, out);
        out.iter().all(|v| v.is_finite())
    }

    /// Diffusion coefficient `a` into `out` (row-major `d × r`).
    #[inline]
    pub fn diffusion_into(&self, x: &[f64], alpha: &[f64], out: &mut [f64]) -> bool {
        (self.diffusion)(x, alpha, out);
        out.iter().all(|v| v.is_finite())
    }

    /// `A = a aᵀ` into `out` (row-major `d × d`), symmetrized. `scratch`
    /// must hold `d × r` values.
    #[inline]
    pub fn a_matrix_into(
        &self,
        x: &[f64],
        alpha: &[f64],
        scratch: &mut [f64],
        out: &mut [f64],
    ) -> bool {
        let (d, r) = (self.d, self.r);
        if !self.diffusion_into(x, alpha, scratch) {
            return false;
        }
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for k in 0..r {
                    s += scratch[i * r + k] * scratch[j * r + k];
                }
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        out.iter().all(|v| v.is_finite())
    }

    /// Analytic `∂_α A` if supplied.
    #[inline]
    pub fn da_dalpha_into(&self, x: &[f64], alpha: &[f64], out: &mut [f64]) -> bool {
        match &self.d_a_d_alpha {
            Some(f) => {
                f(x, alpha, out);
                true
            }
            None => false,
        }
    }

    #[inline]
    pub fn d2a_dalpha2_into(&self, x: &[f64], alpha: &[f64], out: &mut [f64]) -> bool {
        match &self.d2_a_d_alpha2 {
            Some(f) => {
                f(x, alpha, out);
                true
            }
            None => false,
        }
    }

    #[inline]
    pub fn db_dbeta_into(&self, x: &[f64], beta: &[f64], out: &mut [f64]) -> bool {
        match &self.d_b_d_beta {
            Some(f) => {
                f(x, beta, out);
                true
            }
            None => false,
        }
    }

    #[inline]
    pub fn d2b_dbeta2_into(&self, x: &[f64], beta: &[f64], out: &mut [f64]) -> bool {
        match &self.d2_b_d_beta2 {
            Some(f) => {
                f(x, beta, out);
                true
            }
            None => false,
        }
    }

    fn check_lengths(&self, x: &[f64], theta: &[f64], m: usize) -> Result<()> {
        if x.len() != self.d || theta.len() != m {
            return Err(Error::shape(format!(
                "model {}: expected x of length {} and parameter of length {m}, got {} and {}",
                self.name,
                self.d,
                x.len(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// `A(x, α) = a(x, α) a(x, α)ᵀ`.
    pub fn eval_a(&self, x: &[f64], alpha: &[f64]) -> Result<DMatrix<f64>> {
        self.check_lengths(x, alpha, self.m1)?;
        let mut scratch = vec![0.0; self.d * self.r];
        let mut out = vec![0.0; self.d * self.d];
        if !self.a_matrix_into(x, alpha, &mut scratch, &mut out) {
            return Err(Error::ModelEval {
                x: x.to_vec(),
                theta: alpha.to_vec(),
            });
        }
        Ok(DMatrix::from_row_slice(self.d, self.d, &out))
    }

    /// `b(x, β)`.
    pub fn eval_b(&self, x: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
        self.check_lengths(x, beta, self.m2)?;
        let mut out = vec![0.0; self.d];
        if !self.drift_into(x, beta, &mut out) {
            return Err(Error::ModelEval {
                x: x.to_vec(),
                theta: beta.to_vec(),
            });
        }
        Ok(out)
    }

    fn a_flat(&self, x: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = vec![0.0; self.d * self.r];
        let mut out = vec![0.0; self.d * self.d];
        if !self.a_matrix_into(x, alpha, &mut scratch, &mut out) {
            return Err(Error::ModelEval {
                x: x.to_vec(),
                theta: alpha.to_vec(),
            });
        }
        Ok(out)
    }

    /// First-order parameter derivative of `A` (if `alpha_block`) or `b`,
    /// flattened as `m` slabs.
    fn first_derivative(
        &self,
        alpha_block: bool,
        x: &[f64],
        theta: &[f64],
        space: Option<&ParamSpace>,
    ) -> Result<Vec<f64>> {
        let (m, slab) = if alpha_block {
            (self.m1, self.d * self.d)
        } else {
            (self.m2, self.d)
        };
        let mut out = vec![0.0; m * slab];
        let analytic = if alpha_block {
            self.da_dalpha_into(x, theta, &mut out)
        } else {
            self.db_dbeta_into(x, theta, &mut out)
        };
        if analytic {
            return Ok(out);
        }
        let f = |t: &[f64]| {
            if alpha_block {
                self.a_flat(x, t)
            } else {
                self.eval_b(x, t)
            }
        };
        finite_difference(&f, theta, FD_STEP_FIRST, space, &mut out)?;
        Ok(out)
    }

    fn second_derivative(
        &self,
        alpha_block: bool,
        x: &[f64],
        theta: &[f64],
        space: Option<&ParamSpace>,
    ) -> Result<Vec<f64>> {
        let (m, slab) = if alpha_block {
            (self.m1, self.d * self.d)
        } else {
            (self.m2, self.d)
        };
        let mut out = vec![0.0; m * m * slab];
        let analytic = if alpha_block {
            self.d2a_dalpha2_into(x, theta, &mut out)
        } else {
            self.d2b_dbeta2_into(x, theta, &mut out)
        };
        if analytic {
            return Ok(out);
        }
        let has_first = if alpha_block {
            self.d_a_d_alpha.is_some()
        } else {
            self.d_b_d_beta.is_some()
        };
        let step = if has_first {
            FD_STEP_FIRST
        } else {
            FD_STEP_SECOND
        };
        let f = |t: &[f64]| self.first_derivative(alpha_block, x, t, space);
        // `finite_difference` writes ∂_i (slab_j) at [i][j]; relabel to [j][i]
        // would be identical up to symmetry, so the layout is [i][j][slab].
        finite_difference(&f, theta, step, space, &mut out)?;
        symmetrize_pairs(&mut out, m, slab);
        Ok(out)
    }

    fn third_derivative(
        &self,
        alpha_block: bool,
        x: &[f64],
        theta: &[f64],
        space: Option<&ParamSpace>,
    ) -> Result<Vec<f64>> {
        let (m, slab) = if alpha_block {
            (self.m1, self.d * self.d)
        } else {
            (self.m2, self.d)
        };
        let mut out = vec![0.0; m * m * m * slab];
        let f = |t: &[f64]| self.second_derivative(alpha_block, x, t, space);
        finite_difference(&f, theta, FD_STEP_SECOND, space, &mut out)?;
        Ok(out)
    }

    /// Parameter derivatives of `A` or `b`: analytic when supplied, otherwise
    /// central differences with step `1e-6 (1 + |θ_i|)` (one-sided when the
    /// step would leave `space`). Second derivatives difference the first
    /// derivative; third derivatives always difference the second.
    pub fn derivative(
        &self,
        which: DerivativeKind,
        x: &[f64],
        theta: &[f64],
        space: Option<&ParamSpace>,
    ) -> Result<Tensor> {
        let alpha_block = matches!(
            which,
            DerivativeKind::DaDalpha | DerivativeKind::D2aDalpha2 | DerivativeKind::D3aDalpha3
        );
        let m = if alpha_block { self.m1 } else { self.m2 };
        self.check_lengths(x, theta, m)?;
        let tail: Vec<usize> = if alpha_block {
            vec![self.d, self.d]
        } else {
            vec![self.d]
        };
        let (order, data) = match which {
            DerivativeKind::DaDalpha | DerivativeKind::DbDbeta => {
                (1, self.first_derivative(alpha_block, x, theta, space)?)
            }
            DerivativeKind::D2aDalpha2 | DerivativeKind::D2bDbeta2 => {
                (2, self.second_derivative(alpha_block, x, theta, space)?)
            }
            DerivativeKind::D3aDalpha3 | DerivativeKind::D3bDbeta3 => {
                (3, self.third_derivative(alpha_block, x, theta, space)?)
            }
        };
        let mut shape = vec![m; order];
        shape.extend(tail);
        Ok(Tensor { shape, data })
    }
}

pub(crate) const FD_STEP_FIRST: f64 = 1e-6;
pub(crate) const FD_STEP_SECOND: f64 = 1e-4;

/// Per-coordinate step and stencil: central inside the box, one-sided when
/// the central stencil would leave it. Returns `(minus, plus)` offsets.
pub(crate) fn stencil(theta: f64, i: usize, rel: f64, space: Option<&ParamSpace>) -> (f64, f64) {
    let eps = rel * (1.0 + theta.abs());
    match space {
        Some(s) if theta + eps > s.upper[i] && theta - eps >= s.lower[i] => (-eps, 0.0),
        Some(s) if theta - eps < s.lower[i] && theta + eps <= s.upper[i] => (0.0, eps),
        _ => (-eps, eps),
    }
}

/// Differences a vector-valued function of `theta`; `out` receives
/// `theta.len()` consecutive slabs of the function's output length.
fn finite_difference<F>(
    f: &F,
    theta: &[f64],
    rel: f64,
    space: Option<&ParamSpace>,
    out: &mut [f64],
) -> Result<()>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let m = theta.len();
    let slab = out.len() / m.max(1);
    let mut t = theta.to_vec();
    for i in 0..m {
        let (lo, hi) = stencil(theta[i], i, rel, space);
        t[i] = theta[i] + hi;
        let fp = f(&t)?;
        t[i] = theta[i] + lo;
        let fm = f(&t)?;
        t[i] = theta[i];
        let width = hi - lo;
        for k in 0..slab {
            out[i * slab + k] = (fp[k] - fm[k]) / width;
        }
    }
    Ok(())
}

fn symmetrize_pairs(out: &mut [f64], m: usize, slab: usize) {
    for i in 0..m {
        for j in i + 1..m {
            for k in 0..slab {
                let a = out[(i * m + j) * slab + k];
                let b = out[(j * m + i) * slab + k];
                let s = 0.5 * (a + b);
                out[(i * m + j) * slab + k] = s;
                out[(j * m + i) * slab + k] = s;
            }
        }
    }
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: &[&str] = &["paper-3d", "ou-1d", "bm-1d"];

/// Built-in models by name.
///
/// * `paper-3d`: three-dimensional model with trigonometric drift and
///   diagonal state-dependent diffusion, `m1 = 3`, `m2 = 6`.
/// * `ou-1d`: `dX = -β X dt + √α dW`.
/// * `bm-1d`: `dX = β dt + √α dW`.
pub fn builtin_model(name: &str) -> Option<ModelSpec> {
    match name {
        "paper-3d" => Some(paper_3d()),
        "ou-1d" => Some(ou_1d()),
        "bm-1d" => Some(bm_1d()),
        _ => None,
    }
}

#[inline]
fn paper_3d_scale(x: &[f64]) -> [f64; 3] {
    [
        2.0 + (x[2] * x[2]).cos(),
        2.0 + (x[0] * x[0]).cos(),
        2.0 + (x[1] * x[1]).cos(),
    ]
}

fn paper_3d() -> ModelSpec {
    ModelSpec::new(
        "paper-3d",
        3,
        3,
        3,
        6,
        |x, beta, out| {
            out[0] = 1.0 - beta[0] * x[0] - 10.0 * (beta[1] * x[1] * x[1]).sin();
            out[1] = 1.0 - beta[2] * x[1] - 10.0 * (beta[3] * x[2] * x[2]).sin();
            out[2] = 1.0 - beta[4] * x[2] - 10.0 * (beta[5] * x[0] * x[0]).sin();
        },
        |x, alpha, out| {
            let c = paper_3d_scale(x);
            out.iter_mut().for_each(|v| *v = 0.0);
            out[0] = (alpha[0] * c[0]).sqrt();
            out[4] = (alpha[1] * c[1]).sqrt();
            out[8] = (alpha[2] * c[2]).sqrt();
        },
    )
    .with_da_dalpha(|x, _alpha, out| {
        let c = paper_3d_scale(x);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            out[i * 9 + i * 4] = c[i];
        }
    })
    .with_d2a_dalpha2(|_x, _alpha, out| out.iter_mut().for_each(|v| *v = 0.0))
    .with_db_dbeta(|x, beta, out| {
        out.iter_mut().for_each(|v| *v = 0.0);
        // component i depends on (β_{2i}, β_{2i+1}) and states (x_i, x_{i+1 mod 3})
        for i in 0..3 {
            let own = x[i];
            let other = x[(i + 1) % 3];
            let sq = other * other;
            out[(2 * i) * 3 + i] = -own;
            out[(2 * i + 1) * 3 + i] = -10.0 * sq * (beta[2 * i + 1] * sq).cos();
        }
    })
    .with_d2b_dbeta2(|x, beta, out| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            let other = x[(i + 1) % 3];
            let sq = other * other;
            let j = 2 * i + 1;
            out[(j * 6 + j) * 3 + i] = 10.0 * sq * sq * (beta[j] * sq).sin();
        }
    })
}

fn ou_1d() -> ModelSpec {
    ModelSpec::new(
        "ou-1d",
        1,
        1,
        1,
        1,
        |x, beta, out| out[0] = -beta[0] * x[0],
        |_x, alpha, out| out[0] = alpha[0].sqrt(),
    )
    .with_da_dalpha(|_x, _a, out| out[0] = 1.0)
    .with_d2a_dalpha2(|_x, _a, out| out[0] = 0.0)
    .with_db_dbeta(|x, _b, out| out[0] = -x[0])
    .with_d2b_dbeta2(|_x, _b, out| out[0] = 0.0)
}

fn bm_1d() -> ModelSpec {
    ModelSpec::new(
        "bm-1d",
        1,
        1,
        1,
        1,
        |_x, beta, out| out[0] = beta[0],
        |_x, alpha, out| out[0] = alpha[0].sqrt(),
    )
    .with_da_dalpha(|_x, _a, out| out[0] = 1.0)
    .with_d2a_dalpha2(|_x, _a, out| out[0] = 0.0)
    .with_db_dbeta(|_x, _b, out| out[0] = 1.0)
    .with_d2b_dbeta2(|_x, _b, out| out[0] = 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_model_a_at_ones() {
        let m = builtin_model("paper-3d").unwrap();
        let a = m.eval_a(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        let c = 2.0 + 1f64.cos();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { (i + 1) as f64 * c } else { 0.0 };
                assert!((a[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_and_scalar_diffusion() {
        let id = ModelSpec::new(
            "id",
            2,
            2,
            1,
            1,
            |_x, _b, out| out.iter_mut().for_each(|v| *v = 0.0),
            |_x, _a, out| out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]),
        );
        let a = id.eval_a(&[3.0, -1.0], &[0.5]).unwrap();
        assert_eq!(a, DMatrix::identity(2, 2));

        let m = builtin_model("ou-1d").unwrap();
        for alpha in [0.5, 1.0, 2.0] {
            let a = m.eval_a(&[0.3], &[alpha]).unwrap();
            assert!((a[(0, 0)] - alpha).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_a_reports_non_finite() {
        let m = builtin_model("ou-1d").unwrap();
        match m.eval_a(&[0.0], &[f64::NAN]) {
            Err(Error::ModelEval { theta, .. }) => assert!(theta[0].is_nan()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fd_linear_in_alpha() {
        let c = |x: f64| 1.0 + x * x;
        let m = ModelSpec::new(
            "lin",
            1,
            1,
            1,
            1,
            |_x, _b, out| out[0] = 0.0,
            move |x, a, out| out[0] = (a[0] * c(x[0])).sqrt(),
        );
        let t = m
            .derivative(DerivativeKind::DaDalpha, &[0.7], &[1.3], None)
            .unwrap();
        assert_eq!(t.shape, vec![1, 1, 1]);
        assert!((t.data[0] - c(0.7)).abs() / c(0.7) < 1e-8);
    }

    #[test]
    fn constant_drift_has_zero_beta_derivatives() {
        let m = ModelSpec::new(
            "const",
            2,
            2,
            1,
            2,
            |_x, _b, out| out.copy_from_slice(&[1.0, -2.0]),
            |_x, _a, out| out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]),
        );
        for kind in [
            DerivativeKind::DbDbeta,
            DerivativeKind::D2bDbeta2,
            DerivativeKind::D3bDbeta3,
        ] {
            let t = m.derivative(kind, &[0.1, 0.2], &[0.5, 0.5], None).unwrap();
            assert!(t.data.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn one_sided_near_boundary() {
        let m = builtin_model("ou-1d").unwrap().without_derivatives();
        let space = ParamSpace::cube(1, 0.0, 1.0).unwrap();
        // alpha at the lower edge: a central step would need alpha < 0 and sqrt fails
        let t = m
            .derivative(DerivativeKind::DaDalpha, &[0.4], &[0.0], Some(&space))
            .unwrap();
        assert!((t.data[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn clamp_and_contains() {
        let s = ParamSpace::cube(2, 0.0, 1.0).unwrap();
        assert!(s.contains(&[0.0, 1.0]));
        let (c, moved) = s.clamp(&[-0.5, 0.5]);
        assert_eq!(c, vec![0.0, 0.5]);
        assert!(moved);
        assert!(ParamSpace::new(vec![1.0], vec![1.0]).is_err());
    }
}
