//! Particle Markov chain Monte Carlo for scalar state-space models.
//!
//! - [`models`]: the model trait plus the theta-logistic, linear-Gaussian and
//!   nonlinear-gain models.
//! - [`filter`]: SIR and conditional SMC with the product-form likelihood estimate.
//! - [`prc`]: partial rejection control for particle mutations.
//! - [`abc`]: likelihood-free (ABC) filtering.
//! - [`samplers`]: PMMH, particle Gibbs, their hybrid and adaptive Metropolis.
//! - [`oracle`]: Kalman-filter reference computations.
//! - [`diagnostics`]: chain post-processing.

// `!(x > 0.0)` is used deliberately so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abc;
pub mod diagnostics;
pub mod filter;
pub mod models;
pub mod numeric;
pub mod oracle;
pub mod prc;
pub mod samplers;

pub use filter::{FilterConfig, ParticleSystem, ResamplingScheme};
pub use models::StateSpaceModel;
pub use numeric::SimRng;
pub use samplers::{Algorithm, ChainConfig, ChainOutput, ChainState};
