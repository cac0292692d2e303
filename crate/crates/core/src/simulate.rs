//! Euler–Maruyama paths observed with additive i.i.d. noise.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_sqrt};
use crate::model::ModelSpec;
use crate::preprocess::NoisyObservations;

/// Paths leaving `[-EXPLOSION_BOUND, EXPLOSION_BOUND]^d` abort.
pub const EXPLOSION_BOUND: f64 = 1e12;

/// Sampler for a single symmetric, zero-mean, unit-variance noise component.
pub type NoiseSampler = Arc<dyn Fn(&mut ChaCha20Rng) -> f64 + Send + Sync>;

#[derive(Clone, Default)]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// Uniform on `[-√3, √3]`.
    Uniform,
    /// Caller-supplied law with its fourth moment `E|ε|⁴`.
    Custom {
        sampler: NoiseSampler,
        fourth_moment: f64,
    },
}

impl fmt::Debug for NoiseLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseLaw::Gaussian => f.write_str("Gaussian"),
            NoiseLaw::Uniform => f.write_str("Uniform"),
            NoiseLaw::Custom { fourth_moment, .. } => {
                write!(f, "Custom {{ fourth_moment: {fourth_moment} }}")
            }
        }
    }
}

impl NoiseLaw {
    /// `E|ε|⁴` of one component.
    pub fn fourth_moment(&self) -> f64 {
        match self {
            NoiseLaw::Gaussian => 3.0,
            NoiseLaw::Uniform => 1.8,
            NoiseLaw::Custom { fourth_moment, .. } => *fourth_moment,
        }
    }

    #[inline]
    fn sample(&self, rng: &mut ChaCha20Rng) -> f64 {
        match self {
            NoiseLaw::Gaussian => rng.sample(StandardNormal),
            NoiseLaw::Uniform => (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt(),
            NoiseLaw::Custom { sampler, .. } => sampler(rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub model: ModelSpec,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub x0: Vec<f64>,
    pub n: usize,
    pub h: f64,
    /// Euler steps per observation interval.
    pub substeps: usize,
    pub lambda: DMatrix<f64>,
    pub noise_law: NoiseLaw,
    pub seed: u64,
    /// Generator stream; replication `r` of a batch uses stream `r`.
    pub stream: u64,
}

impl SimulationConfig {
    /// Gaussian noise, 10 substeps, stream 0.
    pub fn new(
        model: ModelSpec,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        x0: Vec<f64>,
        n: usize,
        h: f64,
        lambda: DMatrix<f64>,
        seed: u64,
    ) -> Self {
        Self {
            model,
            alpha,
            beta,
            x0,
            n,
            h,
            substeps: 10,
            lambda,
            noise_law: NoiseLaw::Gaussian,
            seed,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model.d;
        if self.alpha.len() != self.model.m1
            || self.beta.len() != self.model.m2
            || self.x0.len() != d
        {
            return Err(Error::config(
                "true parameters or x0 do not match the model dimensions",
            ));
        }
        if self.lambda.nrows() != d || self.lambda.ncols() != d {
            return Err(Error::config("Λ must be d × d"));
        }
        let scale = self.lambda.trace().abs().max(f64::MIN_POSITIVE);
        if (&self.lambda - self.lambda.transpose()).amax() > 1e-12 * scale
            || min_eigenvalue(&self.lambda) < -1e-12 * scale
        {
            return Err(Error::config("Λ must be symmetric positive semidefinite"));
        }
        if self.substeps == 0 {
            return Err(Error::config("substeps must be at least 1"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) || self.n == 0 {
            return Err(Error::config("n and h must be positive"));
        }
        Ok(())
    }
}

/// Latent states and standardized noise alongside the observations.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub obs: NoisyObservations,
    /// `X_{ih}`, row-major `(n + 1) × d`.
    pub latent: Vec<f64>,
    /// `ε_{ih}`, row-major `(n + 1) × d`.
    pub eps: Vec<f64>,
    /// Symmetric square root of `Λ` used for the noise.
    pub lambda_root: DMatrix<f64>,
}

fn run(cfg: &SimulationConfig, keep: bool) -> Result<SimulationTrace> {
    cfg.validate()?;
    let m = &cfg.model;
    let (d, r) = (m.d, m.r);
    let root = sym_sqrt(&cfg.lambda).ok_or_else(|| Error::config("Λ has no PSD square root"))?;
    let noisy = root.iter().any(|v| *v != 0.0);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);

    let dt = cfg.h / cfg.substeps as f64;
    let sqrt_dt = dt.sqrt();
    let rows = cfg.n + 1;
    let mut y = vec![0.0; rows * d];
    let mut latent = if keep {
        vec![0.0; rows * d]
    } else {
        Vec::new()
    };
    let mut eps_all = if keep {
        vec![0.0; rows * d]
    } else {
        Vec::new()
    };
    let mut x = cfg.x0.clone();
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * r];
    let mut z = vec![0.0; r];
    let mut eps = vec![0.0; d];

    for i in 0..rows {
        if i > 0 {
            for _ in 0..cfg.substeps {
                if !m.drift_into(&x, &cfg.beta, &mut b) || !m.diffusion_into(&x, &cfg.alpha, &mut a)
                {
                    return Err(Error::Explosion { step: i });
                }
                for zk in z.iter_mut() {
                    *zk = rng.sample(StandardNormal);
                }
                for c in 0..d {
                    let noise: f64 = (0..r).map(|k| a[c * r + k] * z[k]).sum();
                    x[c] += b[c] * dt + noise * sqrt_dt;
                }
            }
            if x.iter().any(|v| !(v.abs() <= EXPLOSION_BOUND)) {
                return Err(Error::Explosion { step: i });
            }
        }
        for e in eps.iter_mut() {
            *e = cfg.noise_law.sample(&mut rng);
        }
        let row = &mut y[i * d..(i + 1) * d];
        for c in 0..d {
            let shift: f64 = if noisy {
                (0..d).map(|k| root[(c, k)] * eps[k]).sum()
            } else {
                0.0
            };
            row[c] = x[c] + shift;
        }
        if keep {
            latent[i * d..(i + 1) * d].copy_from_slice(&x);
            eps_all[i * d..(i + 1) * d].copy_from_slice(&eps);
        }
    }
    Ok(SimulationTrace {
        obs: NoisyObservations::new(y, d, cfg.h)?,
        latent,
        eps: eps_all,
        lambda_root: root,
    })
}

/// Observations `Y_{ih} = X_{ih} + Λ^{1/2} ε_{ih}`, `i = 0, …, n`.
pub fn simulate_path(cfg: &SimulationConfig) -> Result<NoisyObservations> {
    Ok(run(cfg, false)?.obs)
}

/// As [`simulate_path`], also returning the latent path and the noise draws.
pub fn simulate_path_debug(cfg: &SimulationConfig) -> Result<SimulationTrace> {
    run(cfg, true)
}

/// Replication `r` uses `seed_base` on generator stream `r`.
pub fn batch_simulate(
    cfg: &SimulationConfig,
    replications: usize,
    seed_base: u64,
) -> impl Iterator<Item = Result<NoisyObservations>> + '_ {
    (0..replications).map(move |r| {
        let mut c = cfg.clone();
        c.seed = seed_base;
        c.stream = r as u64;
        simulate_path(&c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;

    #[test]
    fn frozen_path() {
        let model = ModelSpec::new(
            "still",
            2,
            1,
            1,
            1,
            |_x, _b, o| o.fill(0.0),
            |_x, _a, o| o.fill(0.0),
        );
        let cfg = SimulationConfig::new(
            model,
            vec![1.0],
            vec![1.0],
            vec![0.5, -2.0],
            50,
            0.1,
            DMatrix::zeros(2, 2),
            1,
        );
        let obs = simulate_path(&cfg).unwrap();
        for i in 0..=50 {
            assert_eq!(obs.row(i), &[0.5, -2.0]);
        }
    }

    #[test]
    fn explosion_reports_step() {
        let model = ModelSpec::new(
            "blowup",
            1,
            1,
            1,
            1,
            |x, _b, o| o[0] = x[0] * x[0],
            |_x, _a, o| o[0] = 0.0,
        );
        let cfg = SimulationConfig::new(
            model,
            vec![1.0],
            vec![1.0],
            vec![1.0],
            1000,
            0.1,
            DMatrix::zeros(1, 1),
            1,
        );
        assert!(matches!(simulate_path(&cfg), Err(Error::Explosion { .. })));
    }

    #[test]
    fn noise_preserves_latent_path() {
        let model = builtin_model("paper-3d").unwrap();
        let lam =
            DMatrix::from_row_slice(3, 3, &[2e-3, 5e-4, 0.0, 5e-4, 1e-3, 0.0, 0.0, 0.0, 1e-3]);
        let cfg = SimulationConfig::new(
            model,
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 2.0, 3.0, 3.0, 4.0],
            vec![1.0; 3],
            200,
            1e-3,
            lam,
            5,
        );
        let t = simulate_path_debug(&cfg).unwrap();
        for i in 0..=200 {
            for c in 0..3 {
                let shift: f64 = (0..3)
                    .map(|k| t.lambda_root[(c, k)] * t.eps[i * 3 + k])
                    .sum();
                assert!(
                    (t.obs.row(i)[c] - shift - t.latent[i * 3 + c]).abs()
                        <= 1e-15 * (1.0 + t.latent[i * 3 + c].abs())
                );
            }
        }
    }

    #[test]
    fn invalid_lambda_is_config_error() {
        let model = builtin_model("ou-1d").unwrap();
        let cfg = SimulationConfig::new(
            model,
            vec![1.0],
            vec![1.0],
            vec![0.0],
            10,
            0.1,
            DMatrix::from_element(1, 1, -1.0),
            1,
        );
        assert!(simulate_path(&cfg).unwrap_err().is_config());
    }
}
