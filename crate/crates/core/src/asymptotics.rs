//! Half-vectorization indices, the noise fourth-moment matrix and plug-in
//! estimates of the asymptotic information blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contrasts::{EffectiveDiffusion, EffectiveMode};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_sqrt};
use crate::model::{DerivativeKind, ModelSpec};
use crate::preprocess::LocalMeanSeries;
use crate::schedule::TuningConfig;

/// Position (1-based) of the upper-triangle pair `(i, j)`, `1 ≤ i ≤ j ≤ d`,
/// in row-wise half-vectorization.
pub fn sigma_index(d: usize, i: usize, j: usize) -> Result<usize> {
    if i < 1 || i > j || j > d {
        return Err(Error::Domain(format!(
            "pair ({i}, {j}) outside 1 ≤ i ≤ j ≤ {d}"
        )));
    }
    if i == 1 {
        return Ok(j);
    }
    let before: usize = (1..i).map(|l| d - l + 1).sum();
    Ok(before + j - i + 1)
}

/// Inverse of [`sigma_index`].
pub fn sigma_inverse(d: usize, idx: usize) -> Result<(usize, usize)> {
    if idx < 1 || idx > d * (d + 1) / 2 {
        return Err(Error::Domain(format!(
            "index {idx} outside 1..={}",
            d * (d + 1) / 2
        )));
    }
    let mut rest = idx;
    for i in 1..=d {
        let row = d - i + 1;
        if rest <= row {
            return Ok((i, i + rest - 1));
        }
        rest -= row;
    }
    unreachable!()
}

/// Asymptotic covariance of `√n (vech Λ̂ - vech Λ)`: entry `(i1, i2)` is
/// `V(σ⁻¹(i1), σ⁻¹(i2))` with `fourth_moments[k] = E|ε^{(k)}|⁴`.
pub fn noise_matrix_w1(lambda: &DMatrix<f64>, fourth_moments: &[f64]) -> Result<DMatrix<f64>> {
    let d = lambda.nrows();
    if lambda.ncols() != d || fourth_moments.len() != d {
        return Err(Error::shape(
            "Λ must be square with one fourth moment per component",
        ));
    }
    let scale = lambda.trace().abs().max(f64::MIN_POSITIVE);
    if (lambda - lambda.transpose()).amax() > 1e-12 * scale
        || min_eigenvalue(lambda) < -1e-10 * scale
    {
        return Err(Error::Domain(
            "Λ is not symmetric positive semidefinite".into(),
        ));
    }
    let root = sym_sqrt(lambda).ok_or_else(|| Error::Domain("Λ has no PSD square root".into()))?;
    let v = |l1: usize, l2: usize, l3: usize, l4: usize| -> f64 {
        let kurt: f64 = (0..d)
            .map(|k| {
                root[(l1, k)]
                    * root[(l2, k)]
                    * root[(l3, k)]
                    * root[(l4, k)]
                    * (fourth_moments[k] - 3.0)
            })
            .sum();
        kurt + 1.5 * (lambda[(l1, l3)] * lambda[(l2, l4)] + lambda[(l1, l4)] * lambda[(l2, l3)])
    };
    let size = d * (d + 1) / 2;
    let mut w = DMatrix::zeros(size, size);
    for a in 0..size {
        let (i1, j1) = sigma_inverse(d, a + 1)?;
        for b in 0..size {
            let (i2, j2) = sigma_inverse(d, b + 1)?;
            w[(a, b)] = v(i1 - 1, j1 - 1, i2 - 1, j2 - 1);
        }
    }
    Ok(w)
}

/// Plug-in information blocks and per-block sandwich standard errors for
/// `(vech Λ, α, β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationEstimate {
    pub w1: DMatrix<f64>,
    pub i22: DMatrix<f64>,
    pub j22: DMatrix<f64>,
    pub i33: DMatrix<f64>,
    pub j33: DMatrix<f64>,
    /// Block-diagonal `Î`.
    pub i_hat: DMatrix<f64>,
    /// Block-diagonal `Ĵ` (identity in the noise block).
    pub j_hat: DMatrix<f64>,
    /// Standard errors of `vech Λ̂`, `α̂`, `β̂` in that order; `None` for a
    /// block whose `Ĵ` is singular.
    pub standard_errors: Vec<Option<f64>>,
    pub noise_fourth_moments: Vec<f64>,
    /// Description of each block whose standard errors are missing.
    pub failures: Vec<String>,
}

fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols()))
            .copy_from(b);
        off += b.nrows();
    }
    out
}

fn sandwich_se(i: &DMatrix<f64>, j: &DMatrix<f64>, rate: f64) -> Option<Vec<f64>> {
    let jinv = j.clone().try_inverse()?;
    let cov = &jinv * i * &jinv;
    let se: Vec<f64> = cov
        .diagonal()
        .iter()
        .map(|v| v.max(0.0).sqrt() / rate)
        .collect();
    se.iter().all(|v| v.is_finite()).then_some(se)
}

/// Replaces each invariant-measure integral by the average over the local
/// means `ȳ_0, …, ȳ_{k-3}` at `(α̂, β̂, Λ̂)`. `fourth_moments` defaults to the
/// Gaussian value 3.
pub fn plug_in_information(
    model: &ModelSpec,
    series: &LocalMeanSeries,
    alpha: &[f64],
    beta: &[f64],
    lambda_hat: &DMatrix<f64>,
    cfg: &TuningConfig,
    fourth_moments: Option<&[f64]>,
) -> Result<InformationEstimate> {
    let d = model.d;
    let (m1, m2) = (model.m1, model.m2);
    let fourth = fourth_moments
        .map(|f| f.to_vec())
        .unwrap_or_else(|| vec![3.0; d]);
    let w1 = noise_matrix_w1(lambda_hat, &fourth)?;
    let tau = series.schedule.tau;
    let limit = EffectiveDiffusion::new(EffectiveMode::Limit, &series.schedule);
    let with_noise_terms = tau == 2.0;

    let count = series.len().saturating_sub(2);
    if count == 0 {
        return Err(Error::InsufficientBlocks {
            blocks: series.len(),
        });
    }
    let mut i22 = DMatrix::zeros(m1, m1);
    let mut j22 = DMatrix::zeros(m1, m1);
    let mut i33 = DMatrix::zeros(m2, m2);
    for j in 0..count {
        let x = series.row(j);
        let a = model.eval_a(x, alpha)?;
        let s = limit.eval(model, x, alpha, lambda_hat)?;
        let s_inv = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonPdDiffusion {
                block: j + 1,
                alpha: alpha.to_vec(),
            })?
            .inverse();
        let a_inv = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonPdDiffusion {
                block: j + 1,
                alpha: alpha.to_vec(),
            })?
            .inverse();
        let da = model.derivative(DerivativeKind::DaDalpha, x, alpha, None)?;
        let slabs: Vec<DMatrix<f64>> = (0..m1)
            .map(|k| DMatrix::from_row_slice(d, d, &da.data[k * d * d..(k + 1) * d * d]))
            .collect();
        let p: Vec<DMatrix<f64>> = slabs.iter().map(|ak| &s_inv * ak).collect();
        let b: Vec<DMatrix<f64>> = p.iter().map(|pk| pk * &s_inv * 0.75).collect();
        let ba: Vec<DMatrix<f64>> = b.iter().map(|bk| bk * &a).collect();
        let bl: Vec<DMatrix<f64>> = b.iter().map(|bk| bk * lambda_hat).collect();
        for k1 in 0..m1 {
            for k2 in 0..m1 {
                j22[(k1, k2)] += 0.5 * (&p[k1] * &p[k2]).trace();
                let mut t = (&ba[k1] * &ba[k2]).trace();
                if with_noise_terms {
                    t += 4.0 * (&ba[k1] * &bl[k2]).trace() + 12.0 * (&bl[k1] * &bl[k2]).trace();
                }
                i22[(k1, k2)] += t;
            }
        }
        let db = model.derivative(DerivativeKind::DbDbeta, x, beta, None)?;
        let grads: Vec<nalgebra::DVector<f64>> = (0..m2)
            .map(|k| nalgebra::DVector::from_row_slice(&db.data[k * d..(k + 1) * d]))
            .collect();
        let solved: Vec<nalgebra::DVector<f64>> = grads.iter().map(|g| &a_inv * g).collect();
        for k1 in 0..m2 {
            for k2 in 0..m2 {
                i33[(k1, k2)] += grads[k1].dot(&solved[k2]);
            }
        }
    }
    let inv = 1.0 / count as f64;
    i22 *= inv;
    j22 *= inv;
    i33 *= inv;
    let symmetrize = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let (i22, j22, i33) = (symmetrize(&i22), symmetrize(&j22), symmetrize(&i33));
    let j33 = i33.clone();

    let eye = DMatrix::identity(w1.nrows(), w1.nrows());
    let mut failures = Vec::new();
    let mut se = Vec::new();
    let rates = [
        (cfg.n as f64).sqrt(),
        (series.schedule.k as f64).sqrt(),
        cfg.horizon().sqrt(),
    ];
    for (label, i, j, rate) in [
        ("noise", &w1, &eye, rates[0]),
        ("alpha", &i22, &j22, rates[1]),
        ("beta", &i33, &j33, rates[2]),
    ] {
        match sandwich_se(i, j, rate) {
            Some(v) => se.extend(v.into_iter().map(Some)),
            None => {
                failures.push(format!("{label} block information is singular"));
                se.extend(std::iter::repeat_n(None, i.nrows()));
            }
        }
    }

    Ok(InformationEstimate {
        i_hat: block_diag(&[&w1, &i22, &i33]),
        j_hat: block_diag(&[&eye, &j22, &j33]),
        w1,
        i22,
        j22,
        i33,
        j33,
        standard_errors: se,
        noise_fourth_moments: fourth,
        failures,
    })
}
