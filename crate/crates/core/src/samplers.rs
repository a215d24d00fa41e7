//! Particle MCMC: marginal Metropolis-Hastings (PMMH), particle Gibbs (PG) and
//! a hybrid that interleaves the two, plus the adaptive Metropolis proposal
//! used for the static parameter.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{
    run_conditional_filter, run_filter, sample_trajectory, FilterConfig, FilterError, ParticleSystem,
};
use crate::models::{log_joint, StateSpaceModel};
use crate::numeric::{rng_from_seed, standard_normal, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("initial filter collapsed on all {0} attempts")]
    InitFailed(usize),
}

// ---------------------------------------------------------------------------
// Parameter proposals.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    RandomWalk,
    #[default]
    AdaptiveMetropolis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub kind: ProposalKind,
    /// Per-component standard deviations of the initial random walk (diagonal `Sigma_0`).
    pub initial_std: Vec<f64>,
    /// Number of stored parameter values after which adaptation starts.
    pub am_start: usize,
    /// Weight of the fixed safety component.
    pub am_beta: f64,
    /// Multiplier on the empirical covariance; `2.38^2 / d` when unset.
    pub am_scale: Option<f64>,
    /// Variance of the isotropic safety component; `0.1^2 / d` when unset.
    pub am_safety_scale: Option<f64>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            kind: ProposalKind::AdaptiveMetropolis,
            initial_std: Vec::new(),
            am_start: 5000,
            am_beta: 0.05,
            am_scale: None,
            am_safety_scale: None,
        }
    }
}

impl ProposalConfig {
    pub fn random_walk(initial_std: Vec<f64>) -> Self {
        Self { kind: ProposalKind::RandomWalk, initial_std, ..Self::default() }
    }

    pub fn adaptive(initial_std: Vec<f64>, am_start: usize) -> Self {
        Self { kind: ProposalKind::AdaptiveMetropolis, initial_std, am_start, ..Self::default() }
    }

    pub fn validate(&self, dim: usize) -> Result<(), SamplerError> {
        if self.initial_std.len() != dim {
            return Err(SamplerError::InvalidConfig(format!(
                "initial_std has {} entries, parameter dimension is {dim}",
                self.initial_std.len()
            )));
        }
        if self.initial_std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(SamplerError::InvalidConfig("initial_std entries must be finite and >= 0".into()));
        }
        if self.am_start < 1 {
            return Err(SamplerError::InvalidConfig("am_start must be at least 1".into()));
        }
        if !(self.am_beta > 0.0 && self.am_beta < 1.0) {
            return Err(SamplerError::InvalidConfig("am_beta must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn scale(&self, dim: usize) -> f64 {
        self.am_scale.unwrap_or(2.38 * 2.38 / dim as f64)
    }

    pub fn safety_scale(&self, dim: usize) -> f64 {
        self.am_safety_scale.unwrap_or(0.1 * 0.1 / dim as f64)
    }
}

/// Running mean and covariance of every parameter value the chain has held.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaHistory {
    count: usize,
    mean: DVector<f64>,
    // sum of outer products of deviations from the running mean
    scatter: DMatrix<f64>,
}

impl ThetaHistory {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: DVector::zeros(dim), scatter: DMatrix::zeros(dim, dim) }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, theta: &[f64]) {
        let x = DVector::from_column_slice(theta);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased empirical covariance; `None` with fewer than two values.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.count >= 2).then(|| &self.scatter / (self.count - 1) as f64)
    }
}

/// The distribution [`am_propose`] draws from, given the history.
#[derive(Debug, Clone, PartialEq)]
pub enum ProposalCovariance {
    /// `N(theta, Sigma_0)`.
    Initial(DMatrix<f64>),
    /// `(1 - beta) N(theta, scale Sigma_hat) + beta N(theta, safety I)`; the
    /// adapted part is `None` when `Sigma_hat` is not positive definite.
    Mixture { adapted: Option<DMatrix<f64>>, beta: f64, safety: f64 },
}

pub fn proposal_covariance(history: &ThetaHistory, config: &ProposalConfig) -> ProposalCovariance {
    let dim = history.dim();
    if config.kind == ProposalKind::RandomWalk || history.len() < config.am_start {
        let diag = DVector::from_iterator(dim, config.initial_std.iter().map(|s| s * s));
        return ProposalCovariance::Initial(DMatrix::from_diagonal(&diag));
    }
    let adapted = history
        .covariance()
        .map(|c| c * config.scale(dim))
        .and_then(|c| c.clone().cholesky().map(|_| c));
    ProposalCovariance::Mixture { adapted, beta: config.am_beta, safety: config.safety_scale(dim) }
}

/// Adaptive Metropolis proposal: the initial random walk before `am_start`
/// stored values, then the mixture of an adapted component and a small
/// isotropic safety component. Falls back to the safety component alone when
/// the empirical covariance is singular.
pub fn am_propose<R: Rng + ?Sized>(
    theta: &[f64],
    history: &ThetaHistory,
    config: &ProposalConfig,
    rng: &mut R,
) -> Vec<f64> {
    let dim = theta.len();
    if config.kind == ProposalKind::RandomWalk || history.len() < config.am_start {
        return theta.iter().zip(&config.initial_std).map(|(t, s)| t + s * standard_normal(rng)).collect();
    }
    let safety = rng.random::<f64>() < config.am_beta;
    let chol = if safety {
        None
    } else {
        history
            .covariance()
            .and_then(|c| (c * config.scale(dim)).cholesky())
    };
    let z = DVector::from_iterator(dim, (0..dim).map(|_| standard_normal(rng)));
    match chol {
        Some(l) => {
            let step = l.l() * z;
            theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect()
        }
        None => {
            let s = config.safety_scale(dim).sqrt();
            theta.iter().zip(z.iter()).map(|(t, zi)| t + s * zi).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Chain state and single steps.

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub path: Vec<f64>,
    pub log_ml: f64,
    pub log_prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Pmmh,
    Pg,
}

/// What a single step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub kind: StepKind,
    /// PMMH: joint move accepted. PG: parameter move accepted.
    pub accepted: bool,
    pub log_alpha: f64,
    pub proposed_theta: Vec<f64>,
    pub proposed_log_ml: f64,
    pub proposed_log_prior: f64,
    /// Dimension of the proposed block: `T + d_theta` for PMMH, `d_theta` for PG.
    pub proposal_dim: usize,
    pub filter_ran: bool,
    pub cap_hits: usize,
    /// The filter run behind the step (the conditional sweep for PG).
    pub system: Option<ParticleSystem>,
}

/// PMMH step. Proposes `theta*`, runs the filter at `theta*` and draws a path
/// from it, then accepts with probability
/// `min(1, p*(y) prior(theta*) / (p(y) prior(theta)))` (the proposal is symmetric).
/// Proposals outside the prior support are rejected without running the
/// filter; a collapsed filter is always rejected.
pub fn pmmh_step<M: StateSpaceModel>(
    state: &ChainState,
    model: &M,
    y: &[f64],
    filter_config: &FilterConfig,
    proposal: &ProposalConfig,
    history: &ThetaHistory,
    rng: &mut SimRng,
) -> Result<(ChainState, StepOutcome), SamplerError> {
    let proposed = am_propose(&state.theta, history, proposal, rng);
    let log_prior = model.log_prior(&proposed);
    let mut outcome = StepOutcome {
        kind: StepKind::Pmmh,
        accepted: false,
        log_alpha: f64::NEG_INFINITY,
        proposed_theta: proposed.clone(),
        proposed_log_ml: f64::NEG_INFINITY,
        proposed_log_prior: log_prior,
        proposal_dim: y.len() + state.theta.len(),
        filter_ran: false,
        cap_hits: 0,
        system: None,
    };
    if log_prior == f64::NEG_INFINITY {
        return Ok((state.clone(), outcome));
    }
    let system = run_filter(model, &proposed, y, filter_config, rng)?;
    outcome.filter_ran = true;
    outcome.proposed_log_ml = system.log_ml;
    outcome.cap_hits = system.total_cap_hits();
    if system.is_collapsed() {
        outcome.system = Some(system);
        return Ok((state.clone(), outcome));
    }
    let path = sample_trajectory(&system, rng)?;
    outcome.log_alpha = (system.log_ml + log_prior) - (state.log_ml + state.log_prior);
    outcome.accepted = rng.random::<f64>().ln() < outcome.log_alpha;
    let next = if outcome.accepted {
        ChainState { theta: proposed, path, log_ml: system.log_ml, log_prior }
    } else {
        state.clone()
    };
    outcome.system = Some(system);
    Ok((next, outcome))
}

/// Particle Gibbs step: a Metropolis-within-Gibbs move on `theta` against the
/// exact complete-data density given the current path, then a conditional SMC
/// sweep retaining the current path, and a new path drawn from it.
pub fn pg_step<M: StateSpaceModel>(
    state: &ChainState,
    model: &M,
    y: &[f64],
    filter_config: &FilterConfig,
    theta_kernel: &ProposalConfig,
    history: &ThetaHistory,
    rng: &mut SimRng,
) -> Result<(ChainState, StepOutcome), SamplerError> {
    let proposed = am_propose(&state.theta, history, theta_kernel, rng);
    let proposed_prior = model.log_prior(&proposed);
    let mut log_alpha = f64::NEG_INFINITY;
    let mut accepted = false;
    let (mut theta, mut log_prior) = (state.theta.clone(), state.log_prior);
    if proposed_prior > f64::NEG_INFINITY {
        log_alpha = (proposed_prior + log_joint(model, &proposed, &state.path, y))
            - (state.log_prior + log_joint(model, &state.theta, &state.path, y));
        accepted = rng.random::<f64>().ln() < log_alpha;
        if accepted {
            theta = proposed.clone();
            log_prior = proposed_prior;
        }
    }
    let csmc_config = FilterConfig { prc: None, ..filter_config.clone() };
    let system = run_conditional_filter(model, &theta, y, &csmc_config, &state.path, rng)?;
    let path = sample_trajectory(&system, rng)?;
    let next = ChainState { theta, path, log_ml: system.log_ml, log_prior };
    let outcome = StepOutcome {
        kind: StepKind::Pg,
        accepted,
        log_alpha,
        proposed_theta: proposed,
        proposed_log_ml: f64::NAN,
        proposed_log_prior: proposed_prior,
        proposal_dim: state.theta.len(),
        filter_ran: true,
        cap_hits: 0,
        system: Some(system),
    };
    Ok((next, outcome))
}

/// With probability `mix_prob` a PMMH step, otherwise a PG step. No uniform is
/// drawn when `mix_prob` is 0 or 1, so those cases replay the pure kernels.
#[allow(clippy::too_many_arguments)]
pub fn pmh_within_pg_step<M: StateSpaceModel>(
    state: &ChainState,
    model: &M,
    y: &[f64],
    filter_config: &FilterConfig,
    proposal: &ProposalConfig,
    history: &ThetaHistory,
    mix_prob: f64,
    rng: &mut SimRng,
) -> Result<(ChainState, StepOutcome), SamplerError> {
    let use_pmmh = if mix_prob <= 0.0 {
        false
    } else if mix_prob >= 1.0 {
        true
    } else {
        rng.random::<f64>() < mix_prob
    };
    if use_pmmh {
        pmmh_step(state, model, y, filter_config, proposal, history, rng)
    } else {
        pg_step(state, model, y, filter_config, proposal, history, rng)
    }
}

// ---------------------------------------------------------------------------
// Whole chains.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pmmh,
    Pg,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Starting parameter; drawn from the prior when unset.
    pub theta: Option<Vec<f64>>,
    /// Starting path; drawn from the initial filter when unset.
    pub path: Option<Vec<f64>>,
    pub max_retries: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { theta: None, path: None, max_retries: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub filter: FilterConfig,
    pub proposal: ProposalConfig,
    /// PMMH probability per iteration of the hybrid sampler.
    pub mix_prob: f64,
    /// Store every `path_thin`-th path.
    pub path_thin: usize,
    pub init: InitConfig,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            filter: FilterConfig::default(),
            proposal: ProposalConfig::default(),
            mix_prob: 0.1,
            path_thin: 1,
            init: InitConfig::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self, algorithm: Algorithm, param_dim: usize, len: usize) -> Result<(), SamplerError> {
        if self.iterations == 0 {
            return Err(SamplerError::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.path_thin == 0 {
            return Err(SamplerError::InvalidConfig("path_thin must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return Err(SamplerError::InvalidConfig("mix_prob must lie in [0, 1]".into()));
        }
        self.proposal.validate(param_dim)?;
        self.filter.validate()?;
        if let Some(prc) = &self.filter.prc {
            prc.validate_for_marginal_likelihood()
                .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?;
        }
        if algorithm != Algorithm::Pmmh && self.filter.abc.is_some() {
            return Err(SamplerError::InvalidConfig(
                "ABC filtering is only available with PMMH (particle Gibbs needs the observation density)".into(),
            ));
        }
        if let Some(t) = &self.init.theta {
            if t.len() != param_dim {
                return Err(SamplerError::InvalidConfig(format!("init.theta needs {param_dim} entries")));
            }
        }
        if let Some(p) = &self.init.path {
            if p.len() != len {
                return Err(SamplerError::InvalidConfig(format!("init.path needs {len} entries")));
            }
        }
        Ok(())
    }
}

/// Per-iteration bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub kind: StepKind,
    pub log_alpha: f64,
    pub proposed_log_ml: f64,
    pub proposed_log_prior: f64,
    pub proposal_dim: usize,
    pub filter_ran: bool,
    pub cap_hits: usize,
    /// False when `(theta, path)` is bit-identical to the previous state.
    pub state_changed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub param_names: Vec<String>,
    pub initial: ChainState,
    pub thetas: Vec<Vec<f64>>,
    pub log_mls: Vec<f64>,
    pub log_priors: Vec<f64>,
    pub accepted: Vec<bool>,
    pub records: Vec<IterationRecord>,
    pub path_thin: usize,
    /// 1-based iterations whose path is stored in `paths`.
    pub path_iters: Vec<usize>,
    pub paths: Vec<Vec<f64>>,
}

impl ChainOutput {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.len().max(1) as f64
    }

    /// Stored paths from iterations `1..=upto`.
    pub fn paths_until(&self, upto: usize) -> &[Vec<f64>] {
        let end = self.path_iters.partition_point(|&i| i <= upto);
        &self.paths[..end]
    }

    /// Column `i` of the parameter trace.
    pub fn theta_component(&self, i: usize) -> Vec<f64> {
        self.thetas.iter().map(|t| t[i]).collect()
    }

    /// Writes `iter,accepted,log_ml,log_prior,theta_1..theta_d,path_1..path_T`;
    /// path fields are empty on iterations whose path was thinned away.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let d = self.initial.theta.len();
        let len = self.initial.path.len();
        let mut header = String::from("iter,accepted,log_ml,log_prior");
        for i in 1..=d {
            header.push_str(&format!(",theta_{i}"));
        }
        for n in 1..=len {
            header.push_str(&format!(",path_{n}"));
        }
        writeln!(out, "{header}")?;
        let mut stored = self.path_iters.iter().zip(&self.paths).peekable();
        for i in 0..self.len() {
            let iter = i + 1;
            let mut line = format!(
                "{iter},{},{},{}",
                u8::from(self.accepted[i]),
                self.log_mls[i],
                self.log_priors[i]
            );
            for t in &self.thetas[i] {
                line.push_str(&format!(",{t}"));
            }
            match stored.peek() {
                Some((&it, path)) if it == iter => {
                    for x in path.iter() {
                        line.push_str(&format!(",{x}"));
                    }
                    stored.next();
                }
                _ => line.push_str(&",".repeat(len)),
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Writes the per-iteration records
    /// `iter,kind,log_alpha,proposed_log_ml,proposed_log_prior,proposal_dim,filter_ran,cap_hits,state_changed`.
    pub fn write_records_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "iter,kind,log_alpha,proposed_log_ml,proposed_log_prior,proposal_dim,filter_ran,cap_hits,state_changed"
        )?;
        for (i, r) in self.records.iter().enumerate() {
            let kind = match r.kind {
                StepKind::Pmmh => "pmmh",
                StepKind::Pg => "pg",
            };
            writeln!(
                out,
                "{},{kind},{},{},{},{},{},{},{}",
                i + 1,
                r.log_alpha,
                r.proposed_log_ml,
                r.proposed_log_prior,
                r.proposal_dim,
                u8::from(r.filter_ran),
                r.cap_hits,
                u8::from(r.state_changed)
            )?;
        }
        Ok(())
    }
}

fn initial_state<M: StateSpaceModel>(
    model: &M,
    y: &[f64],
    config: &ChainConfig,
    rng: &mut SimRng,
) -> Result<ChainState, SamplerError> {
    let filter = &config.filter;
    let attempts = config.init.max_retries.max(1);
    for _ in 0..attempts {
        let theta = match &config.init.theta {
            Some(t) => t.clone(),
            None => model.sample_prior(rng),
        };
        let log_prior = model.log_prior(&theta);
        if log_prior == f64::NEG_INFINITY {
            return Err(SamplerError::InvalidConfig(format!("initial theta {theta:?} is outside the prior support")));
        }
        let system = run_filter(model, &theta, y, filter, rng)?;
        if system.is_collapsed() {
            continue;
        }
        let path = match &config.init.path {
            Some(p) => p.clone(),
            None => sample_trajectory(&system, rng)?,
        };
        return Ok(ChainState { theta, path, log_ml: system.log_ml, log_prior });
    }
    Err(SamplerError::InitFailed(attempts))
}

/// Runs `config.iterations` steps of the chosen sampler from a seeded stream.
pub fn run_chain<M: StateSpaceModel>(
    algorithm: Algorithm,
    model: &M,
    y: &[f64],
    config: &ChainConfig,
    seed: u64,
) -> Result<ChainOutput, SamplerError> {
    run_chain_with(algorithm, model, y, config, seed, |_, _, _| {})
}

/// [`run_chain`] with a callback invoked after every iteration with the
/// 1-based iteration, the new state and the step outcome.
pub fn run_chain_with<M, F>(
    algorithm: Algorithm,
    model: &M,
    y: &[f64],
    config: &ChainConfig,
    seed: u64,
    mut observe: F,
) -> Result<ChainOutput, SamplerError>
where
    M: StateSpaceModel,
    F: FnMut(usize, &ChainState, &StepOutcome),
{
    let dim = model.param_dim();
    config.validate(algorithm, dim, y.len())?;
    let mut rng = rng_from_seed(seed);
    let mut state = initial_state(model, y, config, &mut rng)?;
    let mut history = ThetaHistory::new(dim);
    history.push(&state.theta);

    let iters = config.iterations;
    let mut out = ChainOutput {
        algorithm,
        seed,
        param_names: model.param_names(),
        initial: state.clone(),
        thetas: Vec::with_capacity(iters),
        log_mls: Vec::with_capacity(iters),
        log_priors: Vec::with_capacity(iters),
        accepted: Vec::with_capacity(iters),
        records: Vec::with_capacity(iters),
        path_thin: config.path_thin,
        path_iters: Vec::with_capacity(iters / config.path_thin + 1),
        paths: Vec::with_capacity(iters / config.path_thin + 1),
    };

    for iter in 1..=iters {
        let (next, mut outcome) = match algorithm {
            Algorithm::Pmmh => pmmh_step(&state, model, y, &config.filter, &config.proposal, &history, &mut rng)?,
            Algorithm::Pg => pg_step(&state, model, y, &config.filter, &config.proposal, &history, &mut rng)?,
            Algorithm::Hybrid => pmh_within_pg_step(
                &state,
                model,
                y,
                &config.filter,
                &config.proposal,
                &history,
                config.mix_prob,
                &mut rng,
            )?,
        };
        let changed = next.theta != state.theta || next.path != state.path;
        observe(iter, &next, &outcome);
        outcome.system = None;
        history.push(&next.theta);
        out.thetas.push(next.theta.clone());
        out.log_mls.push(next.log_ml);
        out.log_priors.push(next.log_prior);
        out.accepted.push(outcome.accepted);
        out.records.push(IterationRecord {
            kind: outcome.kind,
            log_alpha: outcome.log_alpha,
            proposed_log_ml: outcome.proposed_log_ml,
            proposed_log_prior: outcome.proposed_log_prior,
            proposal_dim: outcome.proposal_dim,
            filter_ran: outcome.filter_ran,
            cap_hits: outcome.cap_hits,
            state_changed: changed,
        });
        if iter % config.path_thin == 0 {
            out.path_iters.push(iter);
            out.paths.push(next.path.clone());
        }
        state = next;
    }
    Ok(out)
}
