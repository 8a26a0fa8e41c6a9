//! Post-failure attribution for simulated GUI-agent evaluation.
//!
//! A simulated evaluator rolls out on latent state-transition graphs under
//! configurable corruption. When it reports a failure, the diagnosis loop
//! probes from a localized fork and updates a scalar preference toward
//! "the environment is genuinely broken" until a probe reaches the goal or
//! the preference crosses a threshold.

pub mod agent;
pub mod attribution;
pub mod baselines;
pub mod campaign;
pub mod diagnosis;
pub mod judge;
pub mod metrics;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod trace;
pub mod world;

pub use scalar::Real;

pub type Params = attribution::LikelihoodParams<f64>;
pub type Likelihoods = attribution::BranchLikelihoods<f64>;
pub type Score = attribution::AttributionScore<f64>;
pub type ParamsF32 = attribution::LikelihoodParams<f32>;
pub type LikelihoodsF32 = attribution::BranchLikelihoods<f32>;
pub type ScoreF32 = attribution::AttributionScore<f32>;
