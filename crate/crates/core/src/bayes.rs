//! Bayes-type initial estimators: posterior means of tempered
//! quasi-posteriors under a uniform prior on a parameter box, by MCMC.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrasts::{self, Contrast, EffectiveDiffusion};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamSpace};
use crate::preprocess::{local_means, NoisyObservations};
use crate::schedule::{make_schedule, TuningConfig};

/// Consecutive non-finite target evaluations tolerated before giving up.
pub const MAX_NON_FINITE_RUN: usize = 1000;

/// Proposal scale as a fraction of the box width, shared or per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProposalScale {
    Shared(f64),
    PerCoordinate(Vec<f64>),
}

impl ProposalScale {
    fn resolve(&self, space: &ParamSpace) -> Result<Vec<f64>> {
        let m = space.dim();
        let rel = match self {
            ProposalScale::Shared(s) => vec![*s; m],
            ProposalScale::PerCoordinate(v) if v.len() == m => v.clone(),
            ProposalScale::PerCoordinate(v) => {
                return Err(Error::config(format!(
                    "proposal_scale has {} entries for a {m}-dimensional box",
                    v.len()
                )))
            }
        };
        if rel.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("proposal_scale must be positive"));
        }
        Ok(rel
            .iter()
            .enumerate()
            .map(|(i, s)| s * space.width(i))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    /// Gaussian random walk reflected at the box faces.
    #[default]
    Rwm,
    /// Mixed preconditioned Crank–Nicolson with autoregression `rho`.
    Mpcn {
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

fn default_rho() -> f64 {
    0.8
}

fn default_scale() -> ProposalScale {
    ProposalScale::Shared(0.05)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Total iterations including burn-in.
    pub n_iters: usize,
    pub burn_in: usize,
    #[serde(default = "default_scale")]
    pub proposal_scale: ProposalScale,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default)]
    pub seed: u64,
    /// Stream index of the chain's generator.
    #[serde(default)]
    pub stream: u64,
    /// Enables proposal adaptation during burn-in toward this acceptance rate.
    #[serde(default)]
    pub target_accept: Option<f64>,
    #[serde(default)]
    pub store_chain: bool,
    /// Starting point; the box center when absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    /// Initial inverse temperature of an annealed burn-in. The target is
    /// raised to a power rising geometrically from this value to 1 over the
    /// first half of the burn-in; kept draws always use the untempered target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal_from: Option<f64>,
}

impl McmcConfig {
    pub fn new(n_iters: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            n_iters,
            burn_in,
            proposal_scale: default_scale(),
            sampler: Sampler::Rwm,
            seed,
            stream: 0,
            target_accept: None,
            store_chain: false,
            init: None,
            anneal_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iters {
            return Err(Error::config(format!(
                "burn_in={} must be below n_iters={}",
                self.burn_in, self.n_iters
            )));
        }
        if let Some(t) = self.target_accept {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config(format!("target_accept={t} outside (0, 1)")));
            }
        }
        if let Some(b) = self.anneal_from {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::config(format!("anneal_from={b} outside (0, 1]")));
            }
        }
        if let Sampler::Mpcn { rho } = self.sampler {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::config(format!("mpcn rho={rho} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub log_target: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    /// Smallest per-coordinate batch-means effective sample size.
    pub ess_estimate: f64,
    /// Proposal standard deviations in effect after burn-in.
    pub proposal_sd: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chain: Option<Vec<ChainRecord>>,
}

impl PosteriorSummary {
    /// Writes the stored chain as CSV: `iter,theta_1..theta_m,log_target,accepted`.
    pub fn write_chain_csv<W: Write>(&self, w: W) -> Result<()> {
        let chain = self
            .chain
            .as_ref()
            .ok_or_else(|| Error::config("chain was not stored"))?;
        let m = self.mean.len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["iter".to_string()];
        header.extend((1..=m).map(|i| format!("theta_{i}")));
        header.push("log_target".into());
        header.push("accepted".into());
        out.write_record(&header).map_err(csv_err)?;
        for rec in chain {
            let mut row = vec![rec.iter.to_string()];
            row.extend(rec.theta.iter().map(|t| format!("{t:e}")));
            row.push(format!("{:e}", rec.log_target));
            row.push(u8::from(rec.accepted).to_string());
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Reflects `x` into `[lo, hi]` by folding with period `2 (hi - lo)`.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    if w <= 0.0 {
        return lo;
    }
    let mut y = (x - lo).rem_euclid(2.0 * w);
    if y > w {
        y = 2.0 * w - y;
    }
    lo + y
}

/// Per-coordinate mean and variance by Welford's recursion.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(m: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; m],
            m2: vec![0.0; m],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn var(&self, i: usize) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2[i] / (self.n - 1) as f64
        }
    }
}

/// Batch means with a fixed batch length, for effective sample size.
struct BatchMeans {
    len: usize,
    current: Vec<f64>,
    filled: usize,
    batches: Welford,
}

impl BatchMeans {
    fn new(m: usize, total: usize) -> Self {
        Self {
            len: ((total as f64).sqrt() as usize).max(1),
            current: vec![0.0; m],
            filled: 0,
            batches: Welford::new(m),
        }
    }

    fn push(&mut self, x: &[f64]) {
        for (c, v) in self.current.iter_mut().zip(x) {
            *c += v;
        }
        self.filled += 1;
        if self.filled == self.len {
            let means: Vec<f64> = self.current.iter().map(|c| c / self.len as f64).collect();
            self.batches.push(&means);
            self.current.iter_mut().for_each(|c| *c = 0.0);
            self.filled = 0;
        }
    }

    fn ess(&self, chain: &Welford) -> f64 {
        let total = chain.n as f64;
        (0..chain.mean.len())
            .map(|i| {
                let v = chain.var(i);
                let bv = self.batches.var(i);
                if self.batches.n < 2 || v == 0.0 || bv == 0.0 {
                    total
                } else {
                    (total * v / (self.len as f64 * bv)).min(total)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Start of the window used for proposal adaptation during burn-in.
const ADAPT_START: usize = 100;

/// Posterior mean of `exp(log_target)` under a uniform prior on `space`.
///
/// `log_target` errors of the numerical kinds (non-PD diffusion, failed model
/// evaluation, domain) count as `-∞`; others abort.
pub fn posterior_mean<F>(
    mut log_target: F,
    space: &ParamSpace,
    mcmc: &McmcConfig,
) -> Result<PosteriorSummary>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    mcmc.validate()?;
    let m = space.dim();
    let base_sd = mcmc.proposal_scale.resolve(space)?;
    let mut eval = |theta: &[f64]| -> Result<f64> {
        match log_target(theta) {
            Ok(v) if v.is_nan() => Ok(f64::NEG_INFINITY),
            Ok(v) => Ok(v),
            Err(Error::NonPdDiffusion { .. } | Error::ModelEval { .. } | Error::Domain(_)) => {
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    };

    let mut x = match &mcmc.init {
        Some(init) if init.len() == m && space.contains(init) => init.clone(),
        Some(_) => return Err(Error::config("MCMC init outside the parameter box")),
        None => space.center(),
    };
    let mut lp = eval(&x)?;
    if !lp.is_finite() {
        return Err(Error::DegeneratePosterior(format!(
            "log target is not finite at the starting point {x:?}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(mcmc.seed);
    rng.set_stream(mcmc.stream);
    let adapt = mcmc.target_accept.is_some();
    let target = mcmc.target_accept.unwrap_or(0.35);
    let mut log_factor = 0.0f64;
    let mut sd = base_sd.clone();
    let mut burn_stats = Welford::new(m);
    // MpCN centre and diagonal preconditioner
    let mut center = space.center();
    let mut precond = base_sd.clone();

    let kept = mcmc.n_iters - mcmc.burn_in;
    let mut stats = Welford::new(m);
    let mut batches = BatchMeans::new(m, kept);
    let mut accepted_after = 0usize;
    let mut chain = mcmc.store_chain.then(|| Vec::with_capacity(kept));
    let mut non_finite_run = 0usize;
    let mut proposal = vec![0.0; m];
    let mut z = vec![0.0; m];

    let anneal_len = mcmc.burn_in / 2;
    for iter in 0..mcmc.n_iters {
        let burning = iter < mcmc.burn_in;
        let inv_temp = match mcmc.anneal_from {
            Some(b0) if iter < anneal_len => b0.powf(1.0 - iter as f64 / anneal_len as f64),
            _ => 1.0,
        };
        if mcmc.anneal_from.is_some() && iter == anneal_len {
            // statistics gathered while hot do not describe the target
            burn_stats = Welford::new(m);
        }
        let log_ratio_extra;
        match mcmc.sampler {
            Sampler::Rwm => {
                for i in 0..m {
                    let step: f64 = rng.sample(StandardNormal);
                    proposal[i] = reflect(x[i] + sd[i] * step, space.lower[i], space.upper[i]);
                }
                log_ratio_extra = 0.0;
            }
            Sampler::Mpcn { rho } => {
                let mut norm2 = 0.0;
                for i in 0..m {
                    z[i] = (x[i] - center[i]) / precond[i];
                    norm2 += z[i] * z[i];
                }
                let rate = if norm2 > 0.0 {
                    0.5 * norm2
                } else {
                    0.5 * m as f64
                };
                let r: f64 = Gamma::new(0.5 * m as f64, 1.0 / rate)
                    .map_err(|e| Error::config(e.to_string()))?
                    .sample(&mut rng);
                let scale = (1.0 - rho).sqrt() / r.sqrt();
                let mut norm2_new = 0.0;
                for i in 0..m {
                    let w: f64 = rng.sample(StandardNormal);
                    let zi = rho.sqrt() * z[i] + scale * w;
                    norm2_new += zi * zi;
                    proposal[i] = center[i] + precond[i] * zi;
                }
                log_ratio_extra = 0.5 * m as f64 * (norm2_new.ln() - norm2.ln());
            }
        }

        let inside = space.contains(&proposal);
        let lp_new = if inside {
            eval(&proposal)?
        } else {
            f64::NEG_INFINITY
        };
        if lp_new.is_finite() {
            non_finite_run = 0;
        } else {
            non_finite_run += 1;
            if non_finite_run >= MAX_NON_FINITE_RUN {
                return Err(Error::DegeneratePosterior(format!(
                    "{MAX_NON_FINITE_RUN} consecutive proposals with non-finite log target"
                )));
            }
        }
        let log_alpha = inv_temp * (lp_new - lp) + log_ratio_extra;
        let u: f64 = rng.random();
        let accept = lp_new.is_finite() && (log_alpha >= 0.0 || u.ln() < log_alpha);
        if accept {
            x.copy_from_slice(&proposal);
            lp = lp_new;
        }

        if burning {
            if adapt {
                burn_stats.push(&x);
                let gain = (iter as f64 + 1.0).powf(-0.6);
                log_factor += gain * (f64::from(u8::from(accept)) - target);
                let use_empirical = burn_stats.n > ADAPT_START;
                for i in 0..m {
                    let spread = if use_empirical {
                        let s = burn_stats.var(i).sqrt();
                        if s > 0.0 {
                            2.38 / (m as f64).sqrt() * s
                        } else {
                            base_sd[i]
                        }
                    } else {
                        base_sd[i]
                    };
                    sd[i] = (spread * log_factor.exp()).min(space.width(i));
                    if let Sampler::Mpcn { .. } = mcmc.sampler {
                        if use_empirical {
                            center[i] = burn_stats.mean[i];
                            let s = burn_stats.var(i).sqrt();
                            if s > 0.0 {
                                precond[i] = s;
                            }
                        }
                    }
                }
            }
        } else {
            stats.push(&x);
            batches.push(&x);
            if accept {
                accepted_after += 1;
            }
            if let Some(c) = chain.as_mut() {
                c.push(ChainRecord {
                    iter,
                    theta: x.clone(),
                    log_target: lp,
                    accepted: accept,
                });
            }
        }
    }

    let mean = space.clamp(&stats.mean).0;
    Ok(PosteriorSummary {
        sd: (0..m).map(|i| stats.var(i).sqrt()).collect(),
        mean,
        acceptance_rate: accepted_after as f64 / kept as f64,
        ess_estimate: batches.ess(&stats),
        proposal_sd: match mcmc.sampler {
            Sampler::Rwm => sd,
            Sampler::Mpcn { .. } => precond,
        },
        chain,
    })
}

/// Posterior mean of the tempered reduced-data diffusion contrast over `Θ₁`.
pub fn initial_alpha(
    obs: &NoisyObservations,
    model: &ModelSpec,
    space: &ParamSpace,
    cfg: &TuningConfig,
    lambda_hat: &DMatrix<f64>,
    mcmc: &McmcConfig,
) -> Result<PosteriorSummary> {
    let sched = make_schedule(cfg, cfg.tau1, Some(cfg.eta1))?;
    let series = local_means(obs, &sched)?;
    let eff = EffectiveDiffusion::new(cfg.w1_mode, &sched);
    let contrast = Contrast::w1(model, &series, lambda_hat, eff, sched.k_reduced)?;
    let factor = contrasts::alpha_tempering(&sched, cfg.q1);
    posterior_mean(|a| Ok(factor * contrast.value(a)?), space, mcmc)
}

/// Posterior mean of the tempered reduced-data drift contrast over `Θ₂`.
pub fn initial_beta(
    obs: &NoisyObservations,
    model: &ModelSpec,
    space: &ParamSpace,
    cfg: &TuningConfig,
    mcmc: &McmcConfig,
) -> Result<PosteriorSummary> {
    let sched = make_schedule(cfg, cfg.tau2, Some(cfg.eta2))?;
    let series = local_means(obs, &sched)?;
    let contrast = Contrast::w2(model, &series, sched.k_reduced)?;
    let factor = contrasts::beta_tempering(&sched, cfg.q2);
    posterior_mean(|b| Ok(factor * contrast.value(b)?), space, mcmc)
}
