//! Monte Carlo experiments over simulated paths: configuration, per-replication
//! pipelines, aggregation and reporting.

pub mod ml;
pub mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::McmcConfig;
use crate::contrasts::EffectiveMode;
use crate::error::{Error, Result};
use crate::model::{builtin_model, ModelSpec, ParamSpace, ParamSpaces};
use crate::multistep::hybrid_estimate;
use crate::preprocess::estimate_noise_variance;
use crate::schedule::TuningConfig;
use crate::simulate::{simulate_path, NoiseLaw, SimulationConfig};

pub use ml::{maximize_contrast, ml_from_init, MaximizeOptions, MaximizeResult, MlResult};
pub use report::{
    render_tables, sample_sd, table_csv, write_outputs, EstimatorSummary, ExperimentReport,
    ReplicationFailure,
};

/// Estimator pipelines an experiment can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BayesInit,
    Hybrid,
    MlTrueInit,
    MlUniformInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    Uniform,
}

fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub x0: Vec<f64>,
    /// Full noise covariance, row by row.
    #[serde(default)]
    pub lambda: Option<Vec<Vec<f64>>>,
    /// Diagonal noise covariance.
    #[serde(default)]
    pub lambda_diag: Option<Vec<f64>>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub noise: NoiseKind,
}

impl SimulationSection {
    pub fn lambda_matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        match (&self.lambda, &self.lambda_diag) {
            (Some(rows), None) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::config(format!(
                        "simulation.lambda must be {d} x {d}"
                    )));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
            (None, Some(diag)) if diag.len() == d => Ok(DMatrix::from_diagonal(
                &nalgebra::DVector::from_column_slice(diag),
            )),
            (None, Some(_)) => Err(Error::config(format!(
                "simulation.lambda_diag must have {d} entries"
            ))),
            (None, None) => Ok(DMatrix::zeros(d, d)),
            (Some(_), Some(_)) => Err(Error::config(
                "give either simulation.lambda or simulation.lambda_diag",
            )),
        }
    }
}

/// Tuning parameters; unset entries take the defaults of
/// [`TuningConfig::new`]. Exactly one of `h` and `h_exponent` (`h = n^{-h_exponent}`)
/// must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub n: usize,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub h_exponent: Option<f64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub tau3: Option<f64>,
    pub q1: Option<f64>,
    pub q2: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_prime: Option<f64>,
    pub w1_mode: Option<EffectiveMode>,
    pub drop_noise_in_a: Option<bool>,
}

impl TuningSection {
    pub fn to_config(&self) -> Result<TuningConfig> {
        let h = match (self.h, self.h_exponent) {
            (Some(h), None) => h,
            (None, Some(e)) => (self.n as f64).powf(-e),
            _ => {
                return Err(Error::config(
                    "give exactly one of tuning.h and tuning.h_exponent",
                ))
            }
        };
        let mut c = TuningConfig::new(self.n, h);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            tau1,
            tau2,
            tau3,
            q1,
            q2,
            eta1,
            eta2,
            gamma,
            gamma_prime,
            w1_mode,
            drop_noise_in_a
        );
        c.validate()?;
        Ok(c)
    }
}

fn default_lower() -> f64 {
    0.01
}

fn default_upper() -> f64 {
    10.0
}

/// Parameter boxes: per-coordinate bounds when given, else the cube
/// `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default = "default_lower")]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    #[serde(default)]
    pub alpha_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha_upper: Option<Vec<f64>>,
    #[serde(default)]
    pub beta_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub beta_upper: Option<Vec<f64>>,
}

impl Default for SpaceSection {
    fn default() -> Self {
        Self {
            lower: default_lower(),
            upper: default_upper(),
            alpha_lower: None,
            alpha_upper: None,
            beta_lower: None,
            beta_upper: None,
        }
    }
}

impl SpaceSection {
    pub fn to_spaces(&self, model: &ModelSpec) -> Result<ParamSpaces> {
        let side = |lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>, m: usize| -> Result<ParamSpace> {
            ParamSpace::new(
                lo.clone().unwrap_or_else(|| vec![self.lower; m]),
                hi.clone().unwrap_or_else(|| vec![self.upper; m]),
            )
        };
        let spaces = ParamSpaces {
            alpha: side(&self.alpha_lower, &self.alpha_upper, model.m1)?,
            beta: side(&self.beta_lower, &self.beta_upper, model.m2)?,
        };
        if spaces.alpha.dim() != model.m1 || spaces.beta.dim() != model.m2 {
            return Err(Error::config(
                "parameter box dimensions do not match the model",
            ));
        }
        Ok(spaces)
    }
}

fn default_replications() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in model name.
    pub model: String,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub simulation: SimulationSection,
    pub tuning: TuningSection,
    #[serde(default)]
    pub space: SpaceSection,
    /// Chain settings for the diffusion initializer; `seed` and `stream` are
    /// derived per replication.
    pub mcmc_alpha: McmcConfig,
    pub mcmc_beta: McmcConfig,
}

/// Seed offsets for the independent random sources of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub simulation: u64,
    pub mcmc_alpha: u64,
    pub mcmc_beta: u64,
    pub uniform_starts: u64,
}

impl SeedPlan {
    /// Distinct seeds derived from `base`; replication `r` uses stream `r`
    /// of each.
    pub fn from_base(base: u64) -> Self {
        let mix = |k: u64| base.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Self {
            simulation: mix(0),
            mcmc_alpha: mix(1),
            mcmc_beta: mix(2),
            uniform_starts: mix(3),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        builtin_model(&self.model)
            .ok_or_else(|| Error::config(format!("unknown model '{}'", self.model)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::config("at least one comparison mode is required"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        let model = self.model_spec()?;
        self.tuning.to_config()?;
        self.space.to_spaces(&model)?;
        self.simulation_config(&model)?.validate()?;
        self.mcmc_alpha.validate()?;
        self.mcmc_beta.validate()?;
        Ok(())
    }

    pub fn simulation_config(&self, model: &ModelSpec) -> Result<SimulationConfig> {
        let tuning = self.tuning.to_config()?;
        let s = &self.simulation;
        let mut cfg = SimulationConfig::new(
            model.clone(),
            s.alpha.clone(),
            s.beta.clone(),
            s.x0.clone(),
            tuning.n,
            tuning.h,
            s.lambda_matrix(model.d)?,
            SeedPlan::from_base(self.seed).simulation,
        );
        cfg.substeps = s.substeps;
        cfg.noise_law = match s.noise {
            NoiseKind::Gaussian => NoiseLaw::Gaussian,
            NoiseKind::Uniform => NoiseLaw::Uniform,
        };
        Ok(cfg)
    }

    pub fn has(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }
}

/// Estimates from one replication, keyed by table number.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub estimates: BTreeMap<u8, Vec<f64>>,
    pub timings: BTreeMap<String, f64>,
    /// Uniform random starting point `(α0, β0)` of the ML-uniform mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_start: Option<(Vec<f64>, Vec<f64>)>,
    /// Convergence flags of the ML fits, keyed by table number.
    #[serde(default)]
    pub converged: BTreeMap<u8, bool>,
    #[serde(default)]
    pub newton_fallbacks: usize,
    #[serde(default)]
    pub newton_clamps: usize,
}

/// Upper-triangle entries of a symmetric matrix in `σ` order.
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn uniform_point(space: &ParamSpace, rng: &mut ChaCha20Rng) -> Vec<f64> {
    (0..space.dim())
        .map(|i| space.lower[i] + rng.random::<f64>() * space.width(i))
        .collect()
}

/// Simulates replication `r` and runs every configured pipeline on it.
pub fn run_replication(
    cfg: &ExperimentConfig,
    r: usize,
) -> std::result::Result<ReplicationOutcome, ReplicationFailure> {
    let fail = |stage: &str, e: Error| ReplicationFailure {
        replication: r,
        stage: stage.to_string(),
        message: e.to_string(),
    };
    let model = cfg.model_spec().map_err(|e| fail("setup", e))?;
    let tuning = cfg.tuning.to_config().map_err(|e| fail("setup", e))?;
    let spaces = cfg.space.to_spaces(&model).map_err(|e| fail("setup", e))?;
    let seeds = SeedPlan::from_base(cfg.seed);
    let mut sim = cfg
        .simulation_config(&model)
        .map_err(|e| fail("setup", e))?;
    sim.stream = r as u64;

    let mut out = ReplicationOutcome {
        replication: r,
        ..Default::default()
    };
    let t = Instant::now();
    let obs = simulate_path(&sim).map_err(|e| fail("simulate", e))?;
    out.timings
        .insert("simulate".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let lambda = estimate_noise_variance(&obs);
    out.timings
        .insert("noise".into(), t.elapsed().as_secs_f64());
    out.estimates.insert(1, vech(&lambda.lambda_hat));

    if cfg.has(Mode::BayesInit) || cfg.has(Mode::Hybrid) {
        let mut ma = cfg.mcmc_alpha.clone();
        ma.seed = seeds.mcmc_alpha;
        ma.stream = r as u64;
        let mut mb = cfg.mcmc_beta.clone();
        mb.seed = seeds.mcmc_beta;
        mb.stream = r as u64;
        let res = hybrid_estimate(&obs, &model, &spaces, &tuning, &ma, &mb).map_err(|f| {
            ReplicationFailure {
                replication: r,
                stage: format!("hybrid/{}", f.stage),
                message: f.error.to_string(),
            }
        })?;
        let a0 = res.alpha_init.as_ref().unwrap();
        let b0 = res.beta_init.as_ref().unwrap();
        out.estimates.insert(6, a0.mean.clone());
        out.estimates.insert(7, b0.mean.clone());
        out.estimates.insert(8, res.alpha_hat().unwrap().to_vec());
        out.estimates.insert(9, res.beta_hat().unwrap().to_vec());
        for trace in [
            res.alpha_trace.as_ref().unwrap(),
            res.beta_trace.as_ref().unwrap(),
        ] {
            out.newton_fallbacks += trace.used_identity_fallback.iter().filter(|f| **f).count();
            out.newton_clamps += trace.clamped.iter().filter(|f| **f).count();
        }
        let tm = &res.timings;
        out.timings.insert("bayes_alpha".into(), tm.alpha_init);
        out.timings.insert("bayes_beta".into(), tm.beta_init);
        out.timings.insert("newton_alpha".into(), tm.alpha_newton);
        out.timings.insert("newton_beta".into(), tm.beta_newton);
    }

    if cfg.has(Mode::MlTrueInit) {
        let t = Instant::now();
        let fit = ml_from_init(
            &obs,
            &model,
            &spaces,
            &tuning,
            &cfg.simulation.alpha,
            &cfg.simulation.beta,
        )
        .map_err(|e| fail("ml-true-init", e))?;
        out.timings
            .insert("ml_true_init".into(), t.elapsed().as_secs_f64());
        out.converged.insert(2, fit.alpha.converged);
        out.converged.insert(3, fit.beta.converged);
        out.estimates.insert(2, fit.alpha.theta);
        out.estimates.insert(3, fit.beta.theta);
    }

    if cfg.has(Mode::MlUniformInit) {
        let mut rng = ChaCha20Rng::seed_from_u64(seeds.uniform_starts);
        rng.set_stream(r as u64);
        let a0 = uniform_point(&spaces.alpha, &mut rng);
        let b0 = uniform_point(&spaces.beta, &mut rng);
        let t = Instant::now();
        let fit = ml_from_init(&obs, &model, &spaces, &tuning, &a0, &b0)
            .map_err(|e| fail("ml-uniform-init", e))?;
        out.timings
            .insert("ml_uniform_init".into(), t.elapsed().as_secs_f64());
        out.converged.insert(4, fit.alpha.converged);
        out.converged.insert(5, fit.beta.converged);
        out.estimates.insert(4, fit.alpha.theta);
        out.estimates.insert(5, fit.beta.theta);
        out.uniform_start = Some((a0, b0));
    }
    Ok(out)
}

/// Maximum tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.1;

/// Runs all replications on the current rayon pool and aggregates them in
/// replication order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let outcomes: Vec<_> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(v) => ok.push(v),
            Err(f) => failures.push(f),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * cfg.replications as f64 {
        let detail: Vec<String> = failures
            .iter()
            .map(|f| format!("replication {} ({}): {}", f.replication, f.stage, f.message))
            .collect();
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total: cfg.replications,
            detail: detail.join("; "),
        });
    }
    report::aggregate(cfg, ok, failures, started.elapsed().as_secs_f64())
}
