//! Small dense helpers used in per-block inner loops.
//!
//! The state dimension is small (1 to a handful), so these routines work on
//! row-major `&[f64]` buffers and never allocate.

use nalgebra::{DMatrix, SymmetricEigen};

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// In-place Cholesky of a row-major SPD matrix (lower factor stored in the
/// lower triangle). Returns false when a pivot is not strictly positive.
pub fn cholesky_in_place(m: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut s = m[j * d + j];
        for k in 0..j {
            s -= m[j * d + k] * m[j * d + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return false;
        }
        let l = s.sqrt();
        m[j * d + j] = l;
        for i in j + 1..d {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= m[i * d + k] * m[j * d + k];
            }
            m[i * d + j] = s / l;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// log det of the SPD matrix whose Cholesky factor is `l`.
pub fn cholesky_logdet(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// Inverse of an SPD matrix from its Cholesky factor, written to `out`
/// (row-major). `col` is a scratch buffer of length `d`.
pub fn cholesky_inverse(l: &[f64], d: usize, out: &mut [f64], col: &mut [f64]) {
    for j in 0..d {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        cholesky_solve(l, d, col);
        for i in 0..d {
            out[i * d + j] = col[i];
        }
    }
}

/// `out = a * b` for row-major square matrices.
pub fn matmul(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

/// tr(a b) for row-major square matrices.
pub fn trace_product(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for k in 0..d {
            s += a[i * d + k] * b[k * d + i];
        }
    }
    s
}

/// Symmetric PSD square root via eigendecomposition. Negative eigenvalues
/// down to `-tol * trace` are clipped to zero; anything below is rejected.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = m.nrows();
    if d == 0 {
        return Some(m.clone());
    }
    let sym = (m + m.transpose()) * 0.5;
    let trace = sym.trace().abs().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-12 * trace {
                return None;
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let q = &eig.eigenvectors;
    let root = q * DMatrix::from_diagonal(&vals) * q.transpose();
    Some((&root + root.transpose()) * 0.5)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Result of a guarded symmetric solve.
#[derive(Debug, Clone)]
pub struct SymSolve {
    pub solution: Vec<f64>,
    pub reciprocal_condition: f64,
}

/// Solves `m x = rhs` for symmetric `m` through its eigendecomposition.
/// Returns `None` when `m` has non-finite entries or its reciprocal
/// condition number (min |λ| / max |λ|) falls below `rcond_min`.
pub fn sym_solve(m: &DMatrix<f64>, rhs: &[f64], rcond_min: f64) -> Option<SymSolve> {
    let d = m.nrows();
    if m.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return None;
    }
    let rcond = min / max;
    if !(rcond >= rcond_min) {
        return None;
    }
    let q = &eig.eigenvectors;
    let mut x = vec![0.0; d];
    for k in 0..d {
        let mut proj = 0.0;
        for i in 0..d {
            proj += q[(i, k)] * rhs[i];
        }
        let c = proj / eig.eigenvalues[k];
        for i in 0..d {
            x[i] += c * q[(i, k)];
        }
    }
    Some(SymSolve {
        solution: x,
        reciprocal_condition: rcond,
    })
}
