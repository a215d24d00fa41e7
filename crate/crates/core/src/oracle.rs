//! Exact reference computations for the linear-Gaussian model: the Kalman
//! filter likelihood, a brute-force joint-Gaussian density of the whole
//! observation vector, and a marginal MH chain driven by the exact likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::diagnostics::ks_distance;
use crate::filter::{run_filter, FilterConfig, FilterError};
use crate::models::{simulate, LinearGaussianModel, LinearGaussianParams, ModelError, StateSpaceModel};
use crate::numeric::{rng_from_seed, substream, SimRng};
use crate::samplers::{am_propose, run_chain, Algorithm, ChainConfig, ProposalConfig, SamplerError, ThetaHistory};

/// Filtered moments after the last update, and the accumulated log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: f64,
    pub variance: f64,
    pub log_likelihood: f64,
}

/// Runs the scalar predict/update recursion over `y`.
pub fn kalman_filter(params: &LinearGaussianParams, y: &[f64]) -> KalmanState {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut pred_mean = params.init_mean;
    let mut pred_var = params.init_var;
    let mut state = KalmanState { mean: pred_mean, variance: pred_var, log_likelihood: 0.0 };
    for (n, &obs) in y.iter().enumerate() {
        if n > 0 {
            pred_mean = params.ar_coeff * state.mean;
            pred_var = params.ar_coeff * params.ar_coeff * state.variance + params.state_var;
        }
        let innov_var = pred_var + params.obs_var;
        let innov = obs - pred_mean;
        state.log_likelihood += -0.5 * (ln_2pi + innov_var.ln() + innov * innov / innov_var);
        let gain = pred_var / innov_var;
        state.mean = pred_mean + gain * innov;
        state.variance = (1.0 - gain) * pred_var;
    }
    state
}

/// Exact `ln p(y_{1:T})` for the linear-Gaussian model.
pub fn kalman_loglik(params: &LinearGaussianParams, y: &[f64]) -> f64 {
    kalman_filter(params, y).log_likelihood
}

/// Mean and covariance of `y_{1:T}` assembled entry by entry.
pub fn observation_moments(params: &LinearGaussianParams, len: usize) -> (DVector<f64>, DMatrix<f64>) {
    let phi = params.ar_coeff;
    let mut state_var = vec![0.0; len];
    let mut mean = DVector::zeros(len);
    for n in 0..len {
        state_var[n] = if n == 0 { params.init_var } else { phi * phi * state_var[n - 1] + params.state_var };
        mean[n] = phi.powi(n as i32) * params.init_mean;
    }
    let cov = DMatrix::from_fn(len, len, |i, j| {
        let (lo, hi) = (i.min(j), i.max(j));
        let c = phi.powi((hi - lo) as i32) * state_var[lo];
        if i == j {
            c + params.obs_var
        } else {
            c
        }
    });
    (mean, cov)
}

/// Brute-force `ln p(y_{1:T})` from the explicit joint Gaussian density.
pub fn joint_gaussian_loglik(params: &LinearGaussianParams, y: &[f64]) -> f64 {
    let len = y.len();
    let (mean, cov) = observation_moments(params, len);
    let chol = cov.cholesky().expect("observation covariance is positive definite");
    let resid = DVector::from_column_slice(y) - mean;
    let solved = chol.solve(&resid);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (len as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + resid.dot(&solved))
}

/// State of the exact-likelihood reference chain on `theta = [phi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealState {
    pub theta: Vec<f64>,
    pub log_lik: f64,
    pub log_prior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdealStep {
    pub accepted: bool,
    pub log_alpha: f64,
    pub proposed: Vec<f64>,
}

/// One marginal MH step using the Kalman likelihood in place of a particle estimate.
pub fn ideal_marginal_mh_step<R: Rng + ?Sized>(
    state: &IdealState,
    model: &LinearGaussianModel,
    y: &[f64],
    proposal: &ProposalConfig,
    history: &ThetaHistory,
    rng: &mut R,
) -> (IdealState, IdealStep) {
    let proposed = am_propose(&state.theta, history, proposal, rng);
    let log_prior = model.log_prior(&proposed);
    if log_prior == f64::NEG_INFINITY {
        let step = IdealStep { accepted: false, log_alpha: f64::NEG_INFINITY, proposed };
        return (state.clone(), step);
    }
    let log_lik = kalman_loglik(&model.params_at(&proposed), y);
    let log_alpha = (log_lik + log_prior) - (state.log_lik + state.log_prior);
    let accepted = rng.random::<f64>().ln() < log_alpha;
    let step = IdealStep { accepted, log_alpha, proposed: proposed.clone() };
    if accepted {
        (IdealState { theta: proposed, log_lik, log_prior }, step)
    } else {
        (state.clone(), step)
    }
}

/// Runs `iterations` ideal MH steps from `theta0`; returns the visited parameters.
pub fn run_ideal_chain(
    model: &LinearGaussianModel,
    y: &[f64],
    proposal: &ProposalConfig,
    theta0: &[f64],
    iterations: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut state = IdealState {
        theta: theta0.to_vec(),
        log_lik: kalman_loglik(&model.params_at(theta0), y),
        log_prior: model.log_prior(theta0),
    };
    let mut history = ThetaHistory::new(theta0.len());
    history.push(&state.theta);
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (next, _) = ideal_marginal_mh_step(&state, model, y, proposal, &history, &mut rng);
        history.push(&next.theta);
        out.push(next.theta.clone());
        state = next;
    }
    out
}

/// Outcome of the estimator unbiasedness check.
#[derive(Debug, Clone, Serialize)]
pub struct UnbiasednessReport {
    pub runs: usize,
    pub exact_log_lik: f64,
    pub mean_ratio: f64,
    pub std_error: f64,
    pub passed: bool,
}

/// Runs `runs` independent filters at the true parameter and compares the
/// mean of `p_hat / p_exact` with one, at three standard errors.
pub fn unbiasedness_check(
    params: &LinearGaussianParams,
    len: usize,
    n_particles: usize,
    runs: usize,
    seed: u64,
) -> Result<UnbiasednessReport, FilterError> {
    let model = crate::models::linear_gaussian_model(*params).map_err(model_err)?;
    let theta = model.theta();
    let y = simulate(&model, &theta, len, seed).map_err(model_err)?.observations;
    let exact = kalman_loglik(params, &y);
    let config = FilterConfig::with_particles(n_particles);
    let mut ratios = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut rng: SimRng = substream(seed, r as u64 + 1);
        let sys = run_filter(&model, &theta, &y, &config, &mut rng)?;
        ratios.push((sys.log_ml - exact).exp());
    }
    let mean = ratios.iter().sum::<f64>() / runs as f64;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0);
    let std_error = (var / runs as f64).sqrt();
    Ok(UnbiasednessReport {
        runs,
        exact_log_lik: exact,
        mean_ratio: mean,
        std_error,
        passed: (mean - 1.0).abs() <= 3.0 * std_error,
    })
}

fn model_err(e: ModelError) -> FilterError {
    FilterError::InvalidConfig(e.to_string())
}

/// Outcome of the Kalman-versus-joint-Gaussian comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SelfCheckReport {
    pub cases: usize,
    pub max_len: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Evaluates [`kalman_loglik`] and [`joint_gaussian_loglik`] on `cases` random
/// parameterizations with series of length `1..=max_len`.
pub fn kalman_self_check(cases: usize, max_len: usize, tolerance: f64, seed: u64) -> SelfCheckReport {
    let mut rng = rng_from_seed(seed);
    let mut max_abs_diff = 0.0f64;
    for _ in 0..cases {
        let p = LinearGaussianParams {
            ar_coeff: rng.random_range(-1.5..1.5),
            state_var: rng.random_range(0.05..3.0),
            obs_var: rng.random_range(0.05..3.0),
            init_mean: rng.random_range(-2.0..2.0),
            init_var: rng.random_range(0.05..3.0),
        };
        let len = rng.random_range(1..=max_len.max(1));
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
        let diff = (kalman_loglik(&p, &y) - joint_gaussian_loglik(&p, &y)).abs();
        max_abs_diff = if diff.is_nan() { f64::INFINITY } else { max_abs_diff.max(diff) };
    }
    SelfCheckReport { cases, max_len, max_abs_diff, tolerance, passed: max_abs_diff <= tolerance }
}

/// Settings of the PMMH-versus-exact-MH comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceSettings {
    pub params: LinearGaussianParams,
    pub len: usize,
    pub n_particles: usize,
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub proposal_std: f64,
    pub threshold: f64,
}

impl Default for EquivalenceSettings {
    fn default() -> Self {
        Self {
            params: LinearGaussianParams::default(),
            len: 50,
            n_particles: 200,
            iterations: 50_000,
            burn_in_fraction: 0.2,
            thin: 10,
            proposal_std: 0.1,
            threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub ks_distance: f64,
    pub pmmh_samples: usize,
    pub ideal_samples: usize,
    pub pmmh_acceptance: f64,
    pub pmmh_mean: f64,
    pub ideal_mean: f64,
    pub passed: bool,
}

fn burn_and_thin(values: &[f64], burn_in: usize, thin: usize) -> Vec<f64> {
    values.iter().skip(burn_in).step_by(thin).copied().collect()
}

/// Runs PMMH and the exact-likelihood MH chain on `phi` (prior `Uniform(-1, 1)`)
/// with the same random-walk proposal and compares the retained `phi` samples
/// by their Kolmogorov-Smirnov distance.
pub fn posterior_equivalence_check(settings: &EquivalenceSettings, seed: u64) -> Result<EquivalenceReport, SamplerError> {
    let model = crate::models::linear_gaussian_model(settings.params)
        .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?;
    let theta = model.theta();
    let y = simulate(&model, &theta, settings.len, seed)
        .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?
        .observations;
    let proposal = ProposalConfig::random_walk(vec![settings.proposal_std]);
    let config = ChainConfig {
        iterations: settings.iterations,
        filter: FilterConfig::with_particles(settings.n_particles),
        proposal: proposal.clone(),
        path_thin: settings.iterations,
        init: crate::samplers::InitConfig { theta: Some(theta.clone()), ..Default::default() },
        ..ChainConfig::default()
    };
    let pmmh = run_chain(Algorithm::Pmmh, &model, &y, &config, seed.wrapping_add(1))?;
    let ideal = run_ideal_chain(&model, &y, &proposal, &theta, settings.iterations, seed.wrapping_add(2));

    let burn = (settings.burn_in_fraction * settings.iterations as f64) as usize;
    let a = burn_and_thin(&pmmh.theta_component(0), burn, settings.thin);
    let b = burn_and_thin(&ideal.iter().map(|t| t[0]).collect::<Vec<_>>(), burn, settings.thin);
    let ks = ks_distance(&a, &b);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EquivalenceReport {
        ks_distance: ks,
        pmmh_samples: a.len(),
        ideal_samples: b.len(),
        pmmh_acceptance: pmmh.acceptance_rate(),
        pmmh_mean: mean(&a),
        ideal_mean: mean(&b),
        passed: ks < settings.threshold,
    })
}
