//! Hybrid multi-step estimation for ergodic diffusions observed at high
//! frequency under additive noise.
//!
//! The pipeline estimates the noise covariance `Λ` from squared increments,
//! forms local means over blocks of `p` observations, draws Bayes-type
//! initial estimators of the diffusion and drift parameters from tempered
//! quasi-posteriors on reduced data, and refines them with a fixed number of
//! Newton steps on the full-data quasi-likelihoods.

pub mod asymptotics;
pub mod bayes;
pub mod contrasts;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod multistep;
pub mod preprocess;
pub mod schedule;
pub mod simulate;

pub use contrasts::{
    Contrast, ContrastValue, DerivativeEngine, EffectiveDiffusion, EffectiveMode, Objective, Order,
};
pub use error::{Error, Result};
pub use model::{builtin_model, ModelSpec, ParamSpace, ParamSpaces};
pub use preprocess::{
    estimate_noise_variance, local_means, LocalMeanSeries, NoiseVariance, NoisyObservations,
};
pub use schedule::{compute_j1, compute_j2, make_schedule, BlockSchedule, TuningConfig};
