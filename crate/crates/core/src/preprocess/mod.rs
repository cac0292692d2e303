//! Local means (pre-averaging) and the whole-data noise-variance estimator.

pub mod format;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CompensatedSum;
use crate::schedule::BlockSchedule;

/// Observations `Y_0, …, Y_n` sampled every `h`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyObservations {
    y: Vec<f64>,
    d: usize,
    h: f64,
}

impl NoisyObservations {
    /// `y` holds `(n + 1) × d` values row-major.
    pub fn new(y: Vec<f64>, d: usize, h: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::shape("state dimension must be positive"));
        }
        if y.len() % d != 0 || y.len() < 2 * d {
            return Err(Error::shape(format!(
                "{} values do not form at least two rows of width {d}",
                y.len()
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config(format!(
                "sampling step h={h} must be positive"
            )));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite observation at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { y, d, h })
    }

    /// Number of increments `n` (there are `n + 1` rows).
    pub fn n(&self) -> usize {
        self.y.len() / self.d - 1
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// The first `n + 1` rows.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.n() {
            return Err(Error::shape(format!(
                "cannot truncate {} increments to {n}",
                self.n()
            )));
        }
        Self::new(self.y[..(n + 1) * self.d].to_vec(), self.d, self.h)
    }
}

/// Block means of the observations for one schedule, stored row-major `k × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMeanSeries {
    ybar: Vec<f64>,
    d: usize,
    pub schedule: BlockSchedule,
}

impl LocalMeanSeries {
    /// Builds a series directly from block means (used by tests and by
    /// callers that pre-average elsewhere).
    pub fn from_means(ybar: Vec<f64>, d: usize, schedule: BlockSchedule) -> Result<Self> {
        if d == 0 || ybar.len() != schedule.k * d {
            return Err(Error::shape(format!(
                "{} local means do not match k={} blocks of width {d}",
                ybar.len(),
                schedule.k
            )));
        }
        Ok(Self { ybar, d, schedule })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ybar.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.ybar.is_empty()
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.ybar[j * self.d..(j + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.ybar
    }

    pub fn delta(&self) -> f64 {
        self.schedule.delta
    }
}

/// Estimated noise covariance `Λ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseVariance {
    pub lambda_hat: DMatrix<f64>,
}

/// `ȳ_j = (1/p) Σ_{i<p} y_{jp+i}` for `j < k`. Observations past `k p` are
/// not used.
pub fn local_means(obs: &NoisyObservations, sched: &BlockSchedule) -> Result<LocalMeanSeries> {
    let d = obs.d();
    let (p, k) = (sched.p, sched.k);
    if p == 0 || k * p > obs.n() + 1 {
        return Err(Error::shape(format!(
            "schedule needs {} observations, only {} available",
            k * p,
            obs.n() + 1
        )));
    }
    let mut ybar = vec![0.0; k * d];
    let mut acc = vec![CompensatedSum::new(); d];
    let inv_p = 1.0 / p as f64;
    for j in 0..k {
        acc.iter_mut().for_each(|a| *a = CompensatedSum::new());
        for i in 0..p {
            for (a, v) in acc.iter_mut().zip(obs.row(j * p + i)) {
                a.add(*v);
            }
        }
        for (c, a) in acc.iter().enumerate() {
            ybar[j * d + c] = a.value() * inv_p;
        }
    }
    LocalMeanSeries::from_means(ybar, d, *sched)
}

/// `Λ̂ = (1/2n) Σ_{i<n} (y_{i+1} - y_i)(y_{i+1} - y_i)ᵀ` over the whole data.
pub fn estimate_noise_variance(obs: &NoisyObservations) -> NoiseVariance {
    let d = obs.d();
    let n = obs.n();
    let mut acc = vec![CompensatedSum::new(); d * (d + 1) / 2];
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let (a, b) = (obs.row(i), obs.row(i + 1));
        for c in 0..d {
            diff[c] = b[c] - a[c];
        }
        let mut idx = 0;
        for r in 0..d {
            for c in r..d {
                acc[idx].add(diff[r] * diff[c]);
                idx += 1;
            }
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    let mut lambda = DMatrix::zeros(d, d);
    let mut idx = 0;
    for r in 0..d {
        for c in r..d {
            let v = acc[idx].value() * scale;
            lambda[(r, c)] = v;
            lambda[(c, r)] = v;
            idx += 1;
        }
    }
    NoiseVariance { lambda_hat: lambda }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(p: usize, k: usize, h: f64) -> BlockSchedule {
        BlockSchedule {
            tau: 2.0,
            p,
            delta: p as f64 * h,
            k,
            k_reduced: k,
            t_reduced: k as f64 * p as f64 * h,
        }
    }

    #[test]
    fn hand_computed_block_means() {
        let obs = NoisyObservations::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 1, 0.1).unwrap();
        let lm = local_means(&obs, &sched(2, 3, 0.1)).unwrap();
        assert_eq!(lm.values(), &[0.5, 2.5, 4.5]);
    }

    #[test]
    fn tail_is_dropped() {
        let obs = NoisyObservations::new((0..7).map(|v| v as f64).collect(), 1, 0.1).unwrap();
        let lm = local_means(&obs, &sched(3, 2, 0.1)).unwrap();
        assert_eq!(lm.values(), &[1.0, 4.0]);
    }

    #[test]
    fn schedule_too_long_is_rejected() {
        let obs = NoisyObservations::new(vec![0.0; 6], 1, 0.1).unwrap();
        assert!(local_means(&obs, &sched(2, 4, 0.1)).is_err());
    }

    #[test]
    fn constant_signal_has_zero_noise_estimate() {
        let obs = NoisyObservations::new(vec![1.5, -2.0].repeat(50), 2, 0.01).unwrap();
        let lam = estimate_noise_variance(&obs);
        assert!(lam.lambda_hat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(NoisyObservations::new(vec![0.0, f64::NAN], 1, 0.1).is_err());
    }
}
