//! Likelihood-free filtering.
//!
//! The observation density `g(y_n | x_n)` is replaced by a kernel average over
//! `S` pseudo-observations simulated from the model,
//! `g_abc = (1/S) sum_s pi(y_n(s); y_n, eps)`, with either an indicator kernel
//! `1{rho(y_n(s), y_n) < eps}` or a Gaussian kernel `N(y_n(s); y_n, eps^2)`.
//! The resulting filter (optionally with partial rejection control) yields the
//! ABC estimate of the marginal likelihood used by PMMH.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{run_smc, FilterConfig, FilterError, ParticleSystem};
use crate::models::StateSpaceModel;
use crate::numeric::{log_mean_exp, normal_logpdf, SimRng};
use crate::prc::PrcConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbcError {
    #[error("invalid ABC configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbcKernel {
    Indicator,
    Gaussian,
}

/// Distance between a pseudo-observation and the data point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `|a - b|`; the Euclidean distance for scalar observations.
    #[default]
    Absolute,
}

impl Distance {
    #[inline]
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            Distance::Absolute => (a - b).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbcConfig {
    pub epsilon: f64,
    #[serde(default = "default_pseudo")]
    pub n_pseudo: usize,
    pub kernel: AbcKernel,
    #[serde(default)]
    pub distance: Distance,
}

fn default_pseudo() -> usize {
    10
}

impl AbcConfig {
    pub fn new(epsilon: f64, n_pseudo: usize, kernel: AbcKernel) -> Self {
        Self { epsilon, n_pseudo, kernel, distance: Distance::Absolute }
    }

    pub fn validate(&self) -> Result<(), AbcError> {
        if !(self.epsilon > 0.0) {
            return Err(AbcError::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.n_pseudo == 0 {
            return Err(AbcError::InvalidConfig("n_pseudo must be at least 1".into()));
        }
        Ok(())
    }

    /// Log of the kernel `pi(y_sim; y, eps)`.
    #[inline]
    pub fn log_kernel(&self, y_sim: f64, y: f64) -> f64 {
        match self.kernel {
            AbcKernel::Indicator => {
                if self.distance.eval(y_sim, y) < self.epsilon {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            AbcKernel::Gaussian => normal_logpdf(y_sim, y, self.epsilon * self.epsilon),
        }
    }
}

/// Kernel average over given pseudo-observations (linear scale).
pub fn kernel_average(pseudo: &[f64], y: f64, config: &AbcConfig) -> f64 {
    if pseudo.is_empty() {
        return 0.0;
    }
    pseudo.iter().map(|&ys| config.log_kernel(ys, y).exp()).sum::<f64>() / pseudo.len() as f64
}

/// Simulates `S` pseudo-observations from `g(. | x)` and returns
/// `ln g_abc(y | x)`. Zero (`-inf`) is a legitimate value under the indicator kernel.
pub fn abc_log_local_likelihood<M, R>(
    model: &M,
    theta: &[f64],
    y: f64,
    x: f64,
    config: &AbcConfig,
    rng: &mut R,
) -> f64
where
    M: StateSpaceModel + ?Sized,
    R: Rng + ?Sized,
{
    match config.kernel {
        AbcKernel::Indicator => {
            let hits = (0..config.n_pseudo)
                .filter(|_| {
                    let ys = model.sample_observation(theta, x, rng);
                    config.distance.eval(ys, y) < config.epsilon
                })
                .count();
            if hits == 0 {
                f64::NEG_INFINITY
            } else {
                (hits as f64 / config.n_pseudo as f64).ln()
            }
        }
        AbcKernel::Gaussian => {
            let mut logs = Vec::with_capacity(config.n_pseudo);
            for _ in 0..config.n_pseudo {
                let ys = model.sample_observation(theta, x, rng);
                logs.push(config.log_kernel(ys, y));
            }
            log_mean_exp(&logs)
        }
    }
}

/// Linear-scale [`abc_log_local_likelihood`].
pub fn abc_local_likelihood<M, R>(model: &M, theta: &[f64], y: f64, x: f64, config: &AbcConfig, rng: &mut R) -> f64
where
    M: StateSpaceModel + ?Sized,
    R: Rng + ?Sized,
{
    abc_log_local_likelihood(model, theta, y, x, config, rng).exp()
}

/// SMC-ABC filter with optional partial rejection control. At every step each
/// particle is proposed from `q`, `S` pseudo-observations are simulated, the
/// incremental weight uses the ABC local likelihood in place of `g`, and the
/// PRC loop (when `prc` is active) re-simulates on rejection.
pub fn run_abc_prc_filter<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    y: &[f64],
    filter_config: &FilterConfig,
    abc_config: &AbcConfig,
    prc_config: Option<&PrcConfig>,
    rng: &mut SimRng,
) -> Result<ParticleSystem, FilterError> {
    let config = FilterConfig {
        abc: Some(abc_config.clone()),
        prc: prc_config.cloned(),
        ..filter_config.clone()
    };
    run_smc(model, theta, y, &config, None, rng)
}

/// `ln p_abc(y_{1:T})`, the product over steps of the mean ABC weights.
/// `-inf` when the particle system collapsed.
pub fn abc_marginal_likelihood(system: &ParticleSystem) -> f64 {
    system.log_ml
}
