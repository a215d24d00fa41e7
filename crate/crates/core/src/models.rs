//! State-space model abstraction and the concrete models used by the samplers.
//!
//! A model bundles the initial law `mu`, the transition `f`, the observation
//! density `g`, an importance proposal `q` (bootstrap by default) and a prior on
//! the static parameter vector. States and observations are scalar. Every
//! density is returned on the log scale.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{normal_logpdf, rng_from_seed, standard_normal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter {0:?} lies outside the prior support")]
    OutsideSupport(Vec<f64>),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("series length must be at least 1")]
    EmptySeries,
}

/// Densities and samplers of a scalar state-space model parameterized by `theta`.
pub trait StateSpaceModel: Send + Sync {
    fn param_names(&self) -> Vec<String>;

    fn param_dim(&self) -> usize {
        self.param_names().len()
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    /// Support of the prior. `log_prior` is `-inf` exactly where this is false.
    fn in_support(&self, theta: &[f64]) -> bool;

    fn log_prior(&self, theta: &[f64]) -> f64;

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;

    fn sample_initial<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> f64;

    fn log_initial(&self, theta: &[f64], x: f64) -> f64;

    fn sample_transition<R: Rng + ?Sized>(&self, theta: &[f64], x_prev: f64, rng: &mut R) -> f64;

    fn log_transition(&self, theta: &[f64], x_prev: f64, x: f64) -> f64;

    fn sample_observation<R: Rng + ?Sized>(&self, theta: &[f64], x: f64, rng: &mut R) -> f64;

    fn log_observation(&self, theta: &[f64], x: f64, y: f64) -> f64;

    /// True when the proposal is the transition (and `mu` at the first step),
    /// in which case the filters weight by `g` alone.
    fn is_bootstrap(&self) -> bool {
        true
    }

    fn sample_initial_proposal<R: Rng + ?Sized>(&self, theta: &[f64], _y: f64, rng: &mut R) -> f64 {
        self.sample_initial(theta, rng)
    }

    fn log_initial_proposal(&self, theta: &[f64], _y: f64, x: f64) -> f64 {
        self.log_initial(theta, x)
    }

    fn sample_proposal<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        _y: f64,
        x_prev: f64,
        rng: &mut R,
    ) -> f64 {
        self.sample_transition(theta, x_prev, rng)
    }

    fn log_proposal(&self, theta: &[f64], _y: f64, x_prev: f64, x: f64) -> f64 {
        self.log_transition(theta, x_prev, x)
    }
}

/// Log of the complete-data density `mu(x_1) prod f(x_n|x_{n-1}) prod g(y_n|x_n)`.
pub fn log_joint<M: StateSpaceModel + ?Sized>(model: &M, theta: &[f64], path: &[f64], y: &[f64]) -> f64 {
    assert_eq!(path.len(), y.len(), "path and observations differ in length");
    if path.is_empty() {
        return 0.0;
    }
    let mut acc = model.log_initial(theta, path[0]) + model.log_observation(theta, path[0], y[0]);
    for n in 1..path.len() {
        acc += model.log_transition(theta, path[n - 1], path[n]);
        acc += model.log_observation(theta, path[n], y[n]);
    }
    acc
}

/// Open axis-aligned box `(lower_i, upper_i)` carrying a flat prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl UniformBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::InvalidParameter("prior bounds differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(ModelError::InvalidParameter(
                "prior bounds must be finite with lower < upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.lower.len()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *t > *l && *t < *u)
    }

    /// Log of the constant density on the box.
    pub fn log_density(&self) -> f64 {
        -self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).ln()).sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| loop {
                let v = rng.random_range(l..u);
                if v > l {
                    break v;
                }
            })
            .collect()
    }
}

/// Output of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub states: Vec<f64>,
    pub observations: Vec<f64>,
}

/// Draws a trajectory of length `len` and its observations from the model's own
/// samplers. Pure function of `(theta, len, seed)`.
pub fn simulate<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    len: usize,
    seed: u64,
) -> Result<Simulation, ModelError> {
    if len == 0 {
        return Err(ModelError::EmptySeries);
    }
    if !model.in_support(theta) {
        return Err(ModelError::OutsideSupport(theta.to_vec()));
    }
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(len);
    let mut observations = Vec::with_capacity(len);
    let mut x = model.sample_initial(theta, &mut rng);
    for n in 0..len {
        if n > 0 {
            x = model.sample_transition(theta, x, &mut rng);
        }
        states.push(x);
        observations.push(model.sample_observation(theta, x, &mut rng));
    }
    Ok(Simulation { states, observations })
}

pub fn prior_logpdf<M: StateSpaceModel + ?Sized>(model: &M, theta: &[f64]) -> f64 {
    model.log_prior(theta)
}

// ---------------------------------------------------------------------------
// Log-transformed theta-logistic population model.

/// Hard upper limit on the growth rate.
pub const THETA_LOGISTIC_MAX_GROWTH: f64 = 2.69;

/// Static parameter `(r, zeta, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaLogisticParams {
    pub r: f64,
    pub zeta: f64,
    #[serde(rename = "k")]
    pub capacity: f64,
}

impl ThetaLogisticParams {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.r, self.zeta, self.capacity]
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        Self { r: theta[0], zeta: theta[1], capacity: theta[2] }
    }

    pub fn satisfies_constraints(&self) -> bool {
        self.capacity > 0.0 && self.r < THETA_LOGISTIC_MAX_GROWTH && self.zeta.is_finite()
    }
}

impl Default for ThetaLogisticParams {
    /// Simulation values picked for this crate; not tied to any published dataset.
    fn default() -> Self {
        Self { r: 0.3, zeta: 1.0, capacity: 500.0 }
    }
}

/// `x_n ~ N(x_{n-1} + r (1 - (exp(x_{n-1})/K)^zeta), transition_var)`,
/// `y_n ~ N(x_n, observation_var)`, `x_1 ~ N(ln K, init_std^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLogisticModel {
    pub transition_var: f64,
    pub observation_var: f64,
    pub init_std: f64,
    pub prior: UniformBox,
}

impl Default for ThetaLogisticModel {
    fn default() -> Self {
        Self {
            transition_var: 0.01,
            observation_var: 0.04,
            init_std: 0.5,
            prior: UniformBox {
                lower: vec![0.0, -10.0, 0.0],
                upper: vec![THETA_LOGISTIC_MAX_GROWTH, 10.0, 5000.0],
            },
        }
    }
}

/// The theta-logistic model with its default noise levels and prior box.
pub fn theta_logistic_model() -> ThetaLogisticModel {
    ThetaLogisticModel::default()
}

impl ThetaLogisticModel {
    pub fn new(init_std: f64, prior: UniformBox) -> Result<Self, ModelError> {
        if !(init_std > 0.0) {
            return Err(ModelError::InvalidParameter("init_std must be positive".into()));
        }
        if prior.lower.len() != 3 {
            return Err(ModelError::InvalidParameter("theta-logistic prior needs 3 bounds".into()));
        }
        Ok(Self { init_std, prior, ..Self::default() })
    }

    #[inline]
    pub fn transition_mean(&self, theta: &[f64], x_prev: f64) -> f64 {
        let (r, zeta, k) = (theta[0], theta[1], theta[2]);
        // (exp(x)/K)^zeta evaluated as exp(zeta (x - ln K))
        x_prev + r * (1.0 - (zeta * (x_prev - k.ln())).exp())
    }
}

impl StateSpaceModel for ThetaLogisticModel {
    fn param_names(&self) -> Vec<String> {
        vec!["r".into(), "zeta".into(), "K".into()]
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        theta.len() == 3
            && ThetaLogisticParams::from_slice(theta).satisfies_constraints()
            && self.prior.contains(theta)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if self.in_support(theta) {
            self.prior.log_density()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let theta = self.prior.sample(rng);
            if self.in_support(&theta) {
                return theta;
            }
        }
    }

    fn sample_initial<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> f64 {
        theta[2].ln() + self.init_std * standard_normal(rng)
    }

    fn log_initial(&self, theta: &[f64], x: f64) -> f64 {
        normal_logpdf(x, theta[2].ln(), self.init_std * self.init_std)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, theta: &[f64], x_prev: f64, rng: &mut R) -> f64 {
        self.transition_mean(theta, x_prev) + self.transition_var.sqrt() * standard_normal(rng)
    }

    fn log_transition(&self, theta: &[f64], x_prev: f64, x: f64) -> f64 {
        normal_logpdf(x, self.transition_mean(theta, x_prev), self.transition_var)
    }

    fn sample_observation<R: Rng + ?Sized>(&self, _theta: &[f64], x: f64, rng: &mut R) -> f64 {
        x + self.observation_var.sqrt() * standard_normal(rng)
    }

    fn log_observation(&self, _theta: &[f64], x: f64, y: f64) -> f64 {
        normal_logpdf(y, x, self.observation_var)
    }
}

// ---------------------------------------------------------------------------
// Linear-Gaussian model: the exactly solvable reference case.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianParams {
    pub ar_coeff: f64,
    pub state_var: f64,
    pub obs_var: f64,
    pub init_mean: f64,
    pub init_var: f64,
}

impl Default for LinearGaussianParams {
    fn default() -> Self {
        Self { ar_coeff: 0.9, state_var: 1.0, obs_var: 1.0, init_mean: 0.0, init_var: 1.0 }
    }
}

impl LinearGaussianParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("state_var", self.state_var),
            ("obs_var", self.obs_var),
            ("init_var", self.init_var),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.ar_coeff.is_finite() || !self.init_mean.is_finite() {
            return Err(ModelError::InvalidParameter("ar_coeff and init_mean must be finite".into()));
        }
        Ok(())
    }

    /// Variance of the stationary law, when `|ar_coeff| < 1`.
    pub fn stationary_state_var(&self) -> Option<f64> {
        (self.ar_coeff.abs() < 1.0).then(|| self.state_var / (1.0 - self.ar_coeff * self.ar_coeff))
    }
}

/// `x_n = phi x_{n-1} + N(0, state_var)`, `y_n = x_n + N(0, obs_var)`. The free
/// parameter is `theta = [phi]`; the variances stay fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    base: LinearGaussianParams,
    pub prior: UniformBox,
    /// Use the locally optimal proposal `q(x_n | y_n, x_{n-1}) ∝ f g` instead of the transition.
    pub optimal_proposal: bool,
}

/// Validated linear-Gaussian model with a `Uniform(-1, 1)` prior on `phi`.
pub fn linear_gaussian_model(params: LinearGaussianParams) -> Result<LinearGaussianModel, ModelError> {
    params.validate()?;
    Ok(LinearGaussianModel::new_unchecked(params))
}

impl LinearGaussianModel {
    /// Skips validation. Only meant for simulation with degenerate noise (e.g.
    /// `obs_var = 0`); densities are not finite for such parameters.
    pub fn new_unchecked(params: LinearGaussianParams) -> Self {
        Self {
            base: params,
            prior: UniformBox { lower: vec![-1.0], upper: vec![1.0] },
            optimal_proposal: false,
        }
    }

    pub fn with_prior(mut self, lower: f64, upper: f64) -> Result<Self, ModelError> {
        self.prior = UniformBox::new(vec![lower], vec![upper])?;
        Ok(self)
    }

    pub fn with_optimal_proposal(mut self, on: bool) -> Self {
        self.optimal_proposal = on;
        self
    }

    pub fn base(&self) -> LinearGaussianParams {
        self.base
    }

    pub fn theta(&self) -> Vec<f64> {
        vec![self.base.ar_coeff]
    }

    /// Full parameter set with `phi` taken from `theta`.
    pub fn params_at(&self, theta: &[f64]) -> LinearGaussianParams {
        LinearGaussianParams { ar_coeff: theta[0], ..self.base }
    }

    // Moments of the Gaussian proportional to N(x; m, v) N(y; x, obs_var).
    #[inline]
    fn posterior_moments(&self, prior_mean: f64, prior_var: f64, y: f64) -> (f64, f64) {
        let gain = prior_var / (prior_var + self.base.obs_var);
        (prior_mean + gain * (y - prior_mean), (1.0 - gain) * prior_var)
    }
}

impl StateSpaceModel for LinearGaussianModel {
    fn param_names(&self) -> Vec<String> {
        vec!["phi".into()]
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        self.prior.contains(theta)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if self.in_support(theta) {
            self.prior.log_density()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.prior.sample(rng)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &[f64], rng: &mut R) -> f64 {
        self.base.init_mean + self.base.init_var.sqrt() * standard_normal(rng)
    }

    fn log_initial(&self, _theta: &[f64], x: f64) -> f64 {
        normal_logpdf(x, self.base.init_mean, self.base.init_var)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, theta: &[f64], x_prev: f64, rng: &mut R) -> f64 {
        theta[0] * x_prev + self.base.state_var.sqrt() * standard_normal(rng)
    }

    fn log_transition(&self, theta: &[f64], x_prev: f64, x: f64) -> f64 {
        normal_logpdf(x, theta[0] * x_prev, self.base.state_var)
    }

    fn sample_observation<R: Rng + ?Sized>(&self, _theta: &[f64], x: f64, rng: &mut R) -> f64 {
        x + self.base.obs_var.sqrt() * standard_normal(rng)
    }

    fn log_observation(&self, _theta: &[f64], x: f64, y: f64) -> f64 {
        normal_logpdf(y, x, self.base.obs_var)
    }

    fn is_bootstrap(&self) -> bool {
        !self.optimal_proposal
    }

    fn sample_initial_proposal<R: Rng + ?Sized>(&self, theta: &[f64], y: f64, rng: &mut R) -> f64 {
        if !self.optimal_proposal {
            return self.sample_initial(theta, rng);
        }
        let (m, v) = self.posterior_moments(self.base.init_mean, self.base.init_var, y);
        m + v.sqrt() * standard_normal(rng)
    }

    fn log_initial_proposal(&self, theta: &[f64], y: f64, x: f64) -> f64 {
        if !self.optimal_proposal {
            return self.log_initial(theta, x);
        }
        let (m, v) = self.posterior_moments(self.base.init_mean, self.base.init_var, y);
        normal_logpdf(x, m, v)
    }

    fn sample_proposal<R: Rng + ?Sized>(&self, theta: &[f64], y: f64, x_prev: f64, rng: &mut R) -> f64 {
        if !self.optimal_proposal {
            return self.sample_transition(theta, x_prev, rng);
        }
        let (m, v) = self.posterior_moments(theta[0] * x_prev, self.base.state_var, y);
        m + v.sqrt() * standard_normal(rng)
    }

    fn log_proposal(&self, theta: &[f64], y: f64, x_prev: f64, x: f64) -> f64 {
        if !self.optimal_proposal {
            return self.log_transition(theta, x_prev, x);
        }
        let (m, v) = self.posterior_moments(theta[0] * x_prev, self.base.state_var, y);
        normal_logpdf(x, m, v)
    }
}

// ---------------------------------------------------------------------------
// Model whose dynamics are nearly linear for a small gain and strongly
// nonlinear for a large one.

/// `x_n = decay x_{n-1} + gain * bump x_{n-1} / (1 + x_{n-1}^2) + N(0, transition_var)`,
/// `y_n = x_n + N(0, observation_var)`, `x_1 ~ N(0, init_var)`, `theta = [gain]`.
///
/// For `gain` near zero the transition is an AR(1); as `gain` grows the
/// `x / (1 + x^2)` term folds the state space and the filter degenerates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearGainModel {
    pub decay: f64,
    pub bump: f64,
    pub transition_var: f64,
    pub observation_var: f64,
    pub init_var: f64,
    pub prior: UniformBox,
}

impl Default for NonlinearGainModel {
    fn default() -> Self {
        Self {
            decay: 0.5,
            bump: 25.0,
            transition_var: 1.0,
            observation_var: 0.1,
            init_var: 1.0,
            prior: UniformBox { lower: vec![0.0], upper: vec![2.0] },
        }
    }
}

impl NonlinearGainModel {
    #[inline]
    pub fn transition_mean(&self, theta: &[f64], x_prev: f64) -> f64 {
        self.decay * x_prev + theta[0] * self.bump * x_prev / (1.0 + x_prev * x_prev)
    }
}

impl StateSpaceModel for NonlinearGainModel {
    fn param_names(&self) -> Vec<String> {
        vec!["gain".into()]
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        self.prior.contains(theta)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if self.in_support(theta) {
            self.prior.log_density()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.prior.sample(rng)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &[f64], rng: &mut R) -> f64 {
        self.init_var.sqrt() * standard_normal(rng)
    }

    fn log_initial(&self, _theta: &[f64], x: f64) -> f64 {
        normal_logpdf(x, 0.0, self.init_var)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, theta: &[f64], x_prev: f64, rng: &mut R) -> f64 {
        self.transition_mean(theta, x_prev) + self.transition_var.sqrt() * standard_normal(rng)
    }

    fn log_transition(&self, theta: &[f64], x_prev: f64, x: f64) -> f64 {
        normal_logpdf(x, self.transition_mean(theta, x_prev), self.transition_var)
    }

    fn sample_observation<R: Rng + ?Sized>(&self, _theta: &[f64], x: f64, rng: &mut R) -> f64 {
        x + self.observation_var.sqrt() * standard_normal(rng)
    }

    fn log_observation(&self, _theta: &[f64], x: f64, y: f64) -> f64 {
        normal_logpdf(y, x, self.observation_var)
    }
}
