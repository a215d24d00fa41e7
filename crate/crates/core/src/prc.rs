//! Partial rejection control (PRC) for particle mutations.
//!
//! A proposed move whose pre-PRC incremental weight `w` falls below the
//! threshold `c` is accepted only with probability `p = min(1, w / c)`;
//! rejected moves are redrawn. Accepted particles carry the corrected weight
//! `w r / p = r max(w, c)`, where `r` is the acceptance probability integrated
//! over the proposal. Weights and thresholds are handled on the log scale, with
//! `c = 0` represented by `-inf`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrcError {
    #[error("invalid PRC configuration: {0}")]
    InvalidConfig(String),
    #[error("estimating r needs at least one draw")]
    NoDraws,
}

/// How the threshold `c_n` is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Disabled,
    /// Constant threshold on the linear weight scale.
    Fixed(f64),
    /// Lower empirical `alpha`-quantile of the step's first-attempt weights.
    Quantile(f64),
}

/// What gets redrawn after a rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RejectionScope {
    /// Keep the ancestor, redraw the move.
    #[default]
    MoveOnly,
    /// Redraw the ancestor from the previous weights, then the move.
    AncestorAndMove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrcConfig {
    pub threshold_policy: ThresholdPolicy,
    pub rejection_scope: RejectionScope,
    pub max_attempts: usize,
    /// Monte Carlo draws per particle for `r`. Zero skips the estimate (`r := 1`).
    pub r_estimation_draws: usize,
}

impl Default for PrcConfig {
    fn default() -> Self {
        Self {
            threshold_policy: ThresholdPolicy::Disabled,
            rejection_scope: RejectionScope::MoveOnly,
            max_attempts: 1000,
            r_estimation_draws: 100,
        }
    }
}

impl PrcConfig {
    pub fn fixed(c: f64) -> Self {
        Self { threshold_policy: ThresholdPolicy::Fixed(c), ..Self::default() }
    }

    pub fn quantile(alpha: f64) -> Self {
        Self { threshold_policy: ThresholdPolicy::Quantile(alpha), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PrcError> {
        match self.threshold_policy {
            ThresholdPolicy::Fixed(c) if !(c >= 0.0) || !c.is_finite() => {
                return Err(PrcError::InvalidConfig(format!("threshold must be finite and >= 0, got {c}")));
            }
            ThresholdPolicy::Quantile(a) if !(0.0..1.0).contains(&a) => {
                return Err(PrcError::InvalidConfig(format!("quantile level must lie in [0, 1), got {a}")));
            }
            _ => {}
        }
        if self.max_attempts == 0 {
            return Err(PrcError::InvalidConfig("max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.threshold_policy, ThresholdPolicy::Disabled)
    }

    /// True when the configured threshold can be positive, so that `r` is not
    /// identically one.
    pub fn can_reject(&self) -> bool {
        match self.threshold_policy {
            ThresholdPolicy::Disabled => false,
            ThresholdPolicy::Fixed(c) => c > 0.0,
            ThresholdPolicy::Quantile(_) => true,
        }
    }

    /// Checks that the configuration keeps the marginal-likelihood estimate
    /// unbiased, which a PMMH consumer requires.
    pub fn validate_for_marginal_likelihood(&self) -> Result<(), PrcError> {
        self.validate()?;
        if self.can_reject() && self.r_estimation_draws == 0 {
            return Err(PrcError::InvalidConfig(
                "r_estimation_draws = 0 drops r(c_n, x_{n-1}) from the likelihood estimate; \
                 only valid for pure filtering"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Which value `r` took during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RRegime {
    /// Threshold was zero, `r = 1` exactly.
    Unity,
    Estimated,
    /// Estimate skipped by configuration, `r := 1`.
    Skipped,
}

/// Result of a PRC move.
#[derive(Debug, Clone, PartialEq)]
pub struct PrcOutcome<S> {
    pub state: S,
    /// Pre-PRC incremental log-weight of the accepted draw.
    pub log_weight: f64,
    pub attempts: usize,
    /// Set when the attempt cap forced acceptance.
    pub capped: bool,
}

/// `ln min(1, w / c)`.
#[inline]
pub fn log_acceptance_probability(log_weight: f64, log_threshold: f64) -> f64 {
    if log_threshold == f64::NEG_INFINITY || log_weight >= log_threshold {
        0.0
    } else {
        log_weight - log_threshold
    }
}

/// Runs the accept/reject loop starting from an already weighted first draw.
pub fn prc_accept_loop<S, R, E, P, W>(
    first: (S, f64),
    log_threshold: f64,
    max_attempts: usize,
    mut propose: P,
    mut log_weight: W,
    rng: &mut R,
) -> Result<PrcOutcome<S>, E>
where
    R: Rng + ?Sized,
    P: FnMut(&mut R) -> Result<S, E>,
    W: FnMut(&S, &mut R) -> f64,
{
    let (mut state, mut lw) = first;
    let mut attempts = 1;
    loop {
        if attempts >= max_attempts {
            return Ok(PrcOutcome { state, log_weight: lw, attempts, capped: true });
        }
        let lp = log_acceptance_probability(lw, log_threshold);
        if lp == 0.0 || rng.random::<f64>().ln() < lp {
            return Ok(PrcOutcome { state, log_weight: lw, attempts, capped: false });
        }
        state = propose(rng)?;
        lw = log_weight(&state, rng);
        attempts += 1;
    }
}

/// Proposes `x ~ q`, weighs it and applies rejection control against
/// `log_threshold = ln c_n`. After `max_attempts` draws the last one is
/// accepted unconditionally and the outcome is flagged `capped`.
pub fn prc_propagate<S, R, E, P, W>(
    log_threshold: f64,
    mut propose: P,
    mut log_weight: W,
    max_attempts: usize,
    rng: &mut R,
) -> Result<PrcOutcome<S>, E>
where
    R: Rng + ?Sized,
    P: FnMut(&mut R) -> Result<S, E>,
    W: FnMut(&S, &mut R) -> f64,
{
    let state = propose(rng)?;
    let lw = log_weight(&state, rng);
    prc_accept_loop((state, lw), log_threshold, max_attempts, propose, log_weight, rng)
}

/// Final weight of an accepted particle, `w r / p` with `p = min(1, w / c)`,
/// evaluated in its simplified form `r max(w, c)`.
#[inline]
pub fn corrected_weight(weight: f64, threshold: f64, r_hat: f64) -> f64 {
    r_hat * weight.max(threshold)
}

/// Log-scale form of [`corrected_weight`].
#[inline]
pub fn corrected_log_weight(log_weight: f64, log_threshold: f64, log_r: f64) -> f64 {
    log_r + log_weight.max(log_threshold)
}

/// Monte Carlo estimate of `r(c, x_prev) = E_q[min(1, w(X) / c)]` from `draws`
/// weighted proposals. Zero threshold gives exactly one without drawing.
pub fn estimate_r<R, W>(log_threshold: f64, draws: usize, mut draw_log_weight: W, rng: &mut R) -> Result<f64, PrcError>
where
    R: Rng + ?Sized,
    W: FnMut(&mut R) -> f64,
{
    if log_threshold == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    if draws == 0 {
        return Err(PrcError::NoDraws);
    }
    let total: f64 = (0..draws)
        .map(|_| log_acceptance_probability(draw_log_weight(rng), log_threshold).exp())
        .sum();
    Ok(total / draws as f64)
}

/// 1-based rank of the lower empirical `alpha`-quantile among `n` values.
fn quantile_rank(n: usize, alpha: f64) -> usize {
    // guard against alpha * n landing a hair above an integer
    let raw = (alpha * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Lower empirical quantile: the order statistic of rank `max(1, ceil(alpha N))`.
pub fn adapt_threshold(weights: &[f64], alpha: f64) -> f64 {
    order_statistic(weights, quantile_rank(weights.len(), alpha))
}

/// [`adapt_threshold`] applied to log-weights; returns `ln c_n`.
pub fn adapt_log_threshold(log_weights: &[f64], alpha: f64) -> f64 {
    order_statistic(log_weights, quantile_rank(log_weights.len(), alpha))
}

fn order_statistic(values: &[f64], rank: usize) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut v = values.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    *nth
}
