//! Response-free optimal subsampling for generalized linear models when a
//! cheap surrogate of the response is available for every unit.
//!
//! The crate is organised bottom-up:
//!
//! - [`glm`]: canonical-link families, weighted scores, damped Newton fits.
//! - [`moments`]: a regression forest estimating the conditional root-moment
//!   of the response residual given the surrogate and covariates.
//! - [`sampler`]: selection scores, budget normalisation with capping, and
//!   Bernoulli (Poisson-design) draws.
//! - [`estimator`]: pilot stage, weighted fits, plug-in covariance blocks and
//!   the surrogate-augmented estimator.
//! - [`scenarios`]: seeded simulation designs.
//! - [`harness`]: Monte-Carlo sweeps, real-data mode and result output.

pub mod error;
pub mod estimator;
pub mod glm;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod rng;
pub mod sampler;
pub mod scenarios;

pub use error::{Error, Result};
pub use estimator::{AugmentedEstimate, Dataset, Method, PipelineConfig};
pub use glm::{FitResult, GlmFamily, SolverOptions};
pub use moments::{ForestParams, MomentModel};
pub use sampler::SamplingPlan;
