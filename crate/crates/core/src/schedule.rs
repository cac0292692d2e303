//! Sampling-rate and block-geometry quantities.
//!
//! Every estimator stage works on local means over blocks of `p` consecutive
//! observations. The block size depends on the sampling step `h` and a rate
//! exponent `tau`; the initial Bayes stages additionally restrict themselves
//! to the first `n^eta` observations.

use serde::{Deserialize, Serialize};

use crate::contrasts::EffectiveMode;
use crate::error::{Error, Result};

/// Relative tolerance used when checking `n^-gamma <= h <= n^-gamma'`.
pub const RATE_WINDOW_RTOL: f64 = 1e-9;

/// Rate and tempering parameters of the hybrid estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub n: usize,
    pub h: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub q1: f64,
    pub q2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    /// Effective diffusion used inside the initial-stage `W1` contrast.
    #[serde(default)]
    pub w1_mode: EffectiveMode,
    /// Use `A` instead of `A + 3 Δ^{(2-τ3)/(τ3-1)} Λ` in the full `H1`.
    #[serde(default)]
    pub drop_noise_in_a: bool,
}

impl TuningConfig {
    /// All three rates at 2, `q = 1/2`, `eta = 61/70` and `gamma = gamma' = 0.7`.
    pub fn new(n: usize, h: f64) -> Self {
        Self {
            n,
            h,
            tau1: 2.0,
            tau2: 2.0,
            tau3: 2.0,
            q1: 0.5,
            q2: 0.5,
            eta1: 61.0 / 70.0,
            eta2: 61.0 / 70.0,
            gamma: 0.7,
            gamma_prime: 0.7,
            w1_mode: EffectiveMode::Stage3,
            drop_noise_in_a: false,
        }
    }

    /// Total observation horizon `T = n h`.
    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be positive"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::config(format!("h must be positive, got {}", self.h)));
        }
        for (name, tau) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau3", self.tau3),
        ] {
            check_tau(tau).map_err(|_| Error::config(format!("{name}={tau} outside (1, 2]")))?;
        }
        for (name, q) in [("q1", self.q1), ("q2", self.q2)] {
            if !(q > 0.0 && q <= 0.5) {
                return Err(Error::config(format!("{name}={q} outside (0, 1/2]")));
            }
        }
        if !(self.gamma > 2.0 / 3.0 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma={} outside (2/3, 1)",
                self.gamma
            )));
        }
        if !(self.gamma_prime > 0.0 && self.gamma_prime <= self.gamma) {
            return Err(Error::config(format!(
                "gamma_prime={} outside (0, gamma]",
                self.gamma_prime
            )));
        }
        for (name, eta) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(eta > self.gamma && eta <= 1.0) {
                return Err(Error::config(format!("{name}={eta} outside (gamma, 1]")));
            }
        }
        let n = self.n as f64;
        let lo = n.powf(-self.gamma);
        let hi = n.powf(-self.gamma_prime);
        if self.h < lo * (1.0 - RATE_WINDOW_RTOL) || self.h > hi * (1.0 + RATE_WINDOW_RTOL) {
            return Err(Error::config(format!(
                "h={} outside [n^-gamma, n^-gamma'] = [{lo}, {hi}]",
                self.h
            )));
        }
        Ok(())
    }
}

/// Block geometry for one rate exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub tau: f64,
    /// Observations per block.
    pub p: usize,
    /// Block duration `p h`.
    pub delta: f64,
    /// Number of full-data blocks.
    pub k: usize,
    /// Number of blocks used by the reduced-data stages (equals `k` when no
    /// reduction was requested).
    pub k_reduced: usize,
    /// `k_reduced * delta`.
    pub t_reduced: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 1.0 && tau <= 2.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("tau={tau} outside (1, 2]")))
    }
}

/// Floor that snaps values within a relative 1e-9 of an integer onto it, so
/// that e.g. `0.01^{-1/2}` gives 10 rather than 9.
fn snapped_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

pub fn make_schedule(cfg: &TuningConfig, tau: f64, eta: Option<f64>) -> Result<BlockSchedule> {
    check_tau(tau)?;
    if !(cfg.h > 0.0) || cfg.n == 0 {
        return Err(Error::config("n and h must be positive"));
    }
    let p = snapped_floor(cfg.h.powf(-1.0 / tau)).max(1.0) as usize;
    let delta = p as f64 * cfg.h;
    let k = cfg.n / p;
    if k < 3 {
        return Err(Error::InsufficientBlocks { blocks: k });
    }
    let k_reduced = match eta {
        Some(eta) => {
            if !(eta > cfg.gamma && eta <= 1.0) {
                return Err(Error::Domain(format!("eta={eta} outside (gamma, 1]")));
            }
            let reduced = snapped_floor((cfg.n as f64).powf(eta) / p as f64) as usize;
            let reduced = reduced.min(k);
            if reduced < 3 {
                return Err(Error::InsufficientBlocks { blocks: reduced });
            }
            reduced
        }
        None => k,
    };
    Ok(BlockSchedule {
        tau,
        p,
        delta,
        k,
        k_reduced,
        t_reduced: k_reduced as f64 * delta,
    })
}

fn newton_step_count(arg: f64, label: &str) -> Result<usize> {
    if !(arg > 0.0) || !arg.is_finite() {
        return Err(Error::config(format!(
            "{label}: log2 argument {arg} is not positive"
        )));
    }
    let j = snapped_floor(-arg.log2());
    Ok(if j < 1.0 { 1 } else { j as usize })
}

/// Number of Newton steps for the diffusion parameter,
/// `floor(-log2(q1 (eta1 - gamma/tau1) / (1 - gamma'/tau3)))`, at least 1.
pub fn compute_j1(cfg: &TuningConfig) -> Result<usize> {
    let arg = cfg.q1 * (cfg.eta1 - cfg.gamma / cfg.tau1) / (1.0 - cfg.gamma_prime / cfg.tau3);
    newton_step_count(arg, "J1")
}

/// Number of Newton steps for the drift parameter,
/// `floor(-log2(q2 (eta2 - gamma) / (1 - gamma')))`, at least 1.
pub fn compute_j2(cfg: &TuningConfig) -> Result<usize> {
    let arg = cfg.q2 * (cfg.eta2 - cfg.gamma) / (1.0 - cfg.gamma_prime);
    newton_step_count(arg, "J2")
}
