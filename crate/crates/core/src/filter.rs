//! Sequential importance resampling with the product-form likelihood estimate.
//!
//! Every step resamples (no ESS trigger), proposes from the model's proposal,
//! and weighs by `f g / q` (by `g` alone for bootstrap proposals). The estimate
//! `ln p(y_{1:T}) ≈ sum_n ln( (1/N) sum_k w_n^k )` is accumulated in log space.
//! The same engine also runs conditional SMC for particle Gibbs, the ABC local
//! likelihood and partial rejection control.
//! Under a quantile threshold a pilot pass of first-attempt weights fixes `c_n`,
//! and rejection control then starts from fresh draws.
//!
//! Randomness: resampling draws from the caller's stream; each particle then
//! gets a substream derived from a per-step seed, so results do not depend on
//! whether particles are processed sequentially or in parallel.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{abc_log_local_likelihood, AbcConfig, AbcError};
use crate::models::StateSpaceModel;
use crate::numeric::{log_mean_exp, next_seed, normalize_log_weights, substream, SimRng};
use crate::prc::{
    adapt_log_threshold, corrected_log_weight, estimate_r, prc_accept_loop, PrcConfig, PrcError,
    RRegime, RejectionScope, ThresholdPolicy,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("observation sequence is empty")]
    EmptyObservations,
    #[error("parameter {0:?} lies outside the prior support")]
    OutsideSupport(Vec<f64>),
    #[error("retained path has length {got}, expected {expected}")]
    RetainedLength { expected: usize, got: usize },
    #[error("invalid resampling weight {0}")]
    InvalidWeight(f64),
    #[error("particle system collapsed at step {0}")]
    Collapsed(usize),
    #[error(transparent)]
    Prc(#[from] PrcError),
    #[error(transparent)]
    Abc(#[from] AbcError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub resampling: ResamplingScheme,
    pub prc: Option<PrcConfig>,
    pub abc: Option<AbcConfig>,
    /// Propagate and weigh particles on the rayon pool. Output is identical
    /// to a sequential run.
    pub parallel: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { n_particles: 200, resampling: ResamplingScheme::Multinomial, prc: None, abc: None, parallel: false }
    }
}

impl FilterConfig {
    pub fn with_particles(n_particles: usize) -> Self {
        Self { n_particles, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_particles == 0 {
            return Err(FilterError::InvalidConfig("n_particles must be at least 1".into()));
        }
        if let Some(prc) = &self.prc {
            prc.validate()?;
        }
        if let Some(abc) = &self.abc {
            abc.validate()?;
        }
        Ok(())
    }

    fn active_prc(&self) -> Option<&PrcConfig> {
        self.prc.as_ref().filter(|p| p.is_active())
    }
}

/// Per-step summary written to run logs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub ess: f64,
    pub log_increment: f64,
    /// `ln c_n`, when PRC is active.
    pub log_threshold: Option<f64>,
    pub mean_attempts: f64,
    pub cap_hits: usize,
    pub first_attempt_below: usize,
    pub r_regime: Option<RRegime>,
    pub r_mean: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Fraction of particles whose ABC local likelihood was zero.
    pub abc_zero_fraction: Option<f64>,
    pub abc_mean_g: Option<f64>,
    pub collapsed: bool,
}

/// PRC bookkeeping for one accepted particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrcRecord {
    pub log_pre_weight: f64,
    pub log_r: f64,
    pub attempts: usize,
    pub capped: bool,
}

/// Output of a filter run. Rows are time steps, columns particles; indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub particles: Vec<Vec<f64>>,
    /// `ancestors[n - 1][k]` is the index at step `n - 1` of the parent of particle `k` at step `n`.
    pub ancestors: Vec<Vec<usize>>,
    /// Unnormalized final incremental log-weights.
    pub log_weights: Vec<Vec<f64>>,
    pub norm_weights: Vec<Vec<f64>>,
    pub log_increments: Vec<f64>,
    pub log_ml: f64,
    /// First step at which every weight was zero.
    pub collapsed_at: Option<usize>,
    pub steps: Vec<StepLog>,
    /// Thresholds `ln c_n` used per step (`-inf` means no rejection).
    pub log_thresholds: Vec<f64>,
    /// Filled only when PRC is active.
    pub prc_records: Vec<Vec<PrcRecord>>,
    /// Slot pinned to the retained path in conditional mode (always the last one).
    pub retained_index: Option<usize>,
}

impl ParticleSystem {
    pub fn n_particles(&self) -> usize {
        self.particles.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn is_collapsed(&self) -> bool {
        self.collapsed_at.is_some()
    }

    pub fn total_cap_hits(&self) -> usize {
        self.steps.iter().map(|s| s.cap_hits).sum()
    }

    /// Recomputes `ln p` from the stored weights.
    pub fn recompute_log_ml(&self) -> f64 {
        self.log_weights.iter().map(|row| log_mean_exp(row)).sum()
    }

    /// Dumps `n,k,x,weight,ancestor` rows; `weight` is the natural log of the
    /// unnormalized incremental weight and `ancestor` is empty at the first step.
    pub fn write_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "n,k,x,weight,ancestor")?;
        for (n, row) in self.particles.iter().enumerate() {
            for (k, x) in row.iter().enumerate() {
                let w = self.log_weights[n][k];
                if n == 0 {
                    writeln!(out, "{n},{k},{x},{w},")?;
                } else {
                    writeln!(out, "{n},{k},{x},{w},{}", self.ancestors[n - 1][k])?;
                }
            }
        }
        Ok(())
    }

    /// Dumps the per-step run log as CSV.
    pub fn write_step_log<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "n,ess,log_increment,log_threshold,mean_attempts,cap_hits,first_attempt_below,r_regime,r_mean,r_min,r_max,abc_zero_fraction,abc_mean_g,collapsed"
        )?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.steps {
            let regime = match s.r_regime {
                Some(RRegime::Unity) => "unity",
                Some(RRegime::Estimated) => "estimated",
                Some(RRegime::Skipped) => "skipped",
                None => "",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.ess,
                s.log_increment,
                opt(s.log_threshold),
                s.mean_attempts,
                s.cap_hits,
                s.first_attempt_below,
                regime,
                s.r_mean,
                s.r_min,
                s.r_max,
                opt(s.abc_zero_fraction),
                opt(s.abc_mean_g),
                s.collapsed
            )?;
        }
        Ok(())
    }
}

/// Effective sample size `1 / sum W^2` of a normalized weight row.
pub fn ess(norm_weights: &[f64]) -> f64 {
    1.0 / norm_weights.iter().map(|w| w * w).sum::<f64>()
}

fn cumulative(weights: &[f64]) -> Result<Vec<f64>, FilterError> {
    let mut acc = 0.0;
    let mut cum = Vec::with_capacity(weights.len());
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(FilterError::InvalidWeight(w));
        }
        acc += w;
        cum.push(acc);
    }
    if !(acc > 0.0) {
        return Err(FilterError::InvalidWeight(acc));
    }
    Ok(cum)
}

/// Index `i` with `cum[i-1] <= u < cum[i]`, for `u` on the scale of `cum`.
#[inline]
fn invert_cdf(cum: &[f64], u: f64) -> usize {
    let i = cum.partition_point(|&c| c <= u);
    if i < cum.len() {
        return i;
    }
    // rounding left u at or above the total: take the last positive-weight index
    let total = cum[cum.len() - 1];
    cum.iter().position(|&c| c == total).unwrap_or(cum.len() - 1)
}

fn draw_index<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> usize {
    let total = cum[cum.len() - 1];
    invert_cdf(cum, rng.random::<f64>() * total)
}

/// Draws `count` ancestor indices from `weights`.
///
/// Multinomial: i.i.d. categorical draws. Systematic: one uniform `u`, then
/// positions `(u + i) / count`.
pub fn resample<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    scheme: ResamplingScheme,
    rng: &mut R,
) -> Result<Vec<usize>, FilterError> {
    let cum = cumulative(weights)?;
    let total = cum[cum.len() - 1];
    Ok(match scheme {
        ResamplingScheme::Multinomial => (0..count).map(|_| invert_cdf(&cum, rng.random::<f64>() * total)).collect(),
        ResamplingScheme::Systematic => {
            let u: f64 = rng.random();
            let step = total / count as f64;
            let mut out = Vec::with_capacity(count);
            let mut j = 0;
            for i in 0..count {
                let pos = (u + i as f64) * step;
                while j < cum.len() - 1 && cum[j] <= pos {
                    j += 1;
                }
                out.push(j);
            }
            out
        }
    })
}

/// Plain (optionally guided, PRC- or ABC-augmented) SIR filter.
pub fn run_filter<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    y: &[f64],
    config: &FilterConfig,
    rng: &mut SimRng,
) -> Result<ParticleSystem, FilterError> {
    run_smc(model, theta, y, config, None, rng)
}

/// Conditional SMC: the last particle slot holds `retained` at every step and
/// is its own ancestor; the other `N - 1` particles are resampled
/// multinomially from all `N`. PRC is not available here.
pub fn run_conditional_filter<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    y: &[f64],
    config: &FilterConfig,
    retained: &[f64],
    rng: &mut SimRng,
) -> Result<ParticleSystem, FilterError> {
    if retained.len() != y.len() {
        return Err(FilterError::RetainedLength { expected: y.len(), got: retained.len() });
    }
    if config.active_prc().is_some() {
        return Err(FilterError::InvalidConfig("partial rejection control is not supported in conditional SMC".into()));
    }
    run_smc(model, theta, y, config, Some(retained), rng)
}

/// Samples a path by drawing a terminal index from the final weights and
/// tracing its ancestry back to the first step.
pub fn sample_trajectory<R: Rng + ?Sized>(system: &ParticleSystem, rng: &mut R) -> Result<Vec<f64>, FilterError> {
    if let Some(n) = system.collapsed_at {
        return Err(FilterError::Collapsed(n));
    }
    let last = system.norm_weights.last().ok_or(FilterError::EmptyObservations)?;
    let cum = cumulative(last)?;
    let mut k = draw_index(&cum, rng);
    let len = system.len();
    let mut path = vec![0.0; len];
    path[len - 1] = system.particles[len - 1][k];
    for n in (0..len - 1).rev() {
        k = system.ancestors[n][k];
        path[n] = system.particles[n][k];
    }
    Ok(path)
}

struct Slot {
    rng: SimRng,
    ancestor: usize,
    x: f64,
    log_weight: f64,
}

struct Settled {
    ancestor: usize,
    x: f64,
    log_weight: f64,
    prc: Option<PrcRecord>,
}

/// One filtering step's view of the model, shared read-only by all particles.
struct StepContext<'a, M: StateSpaceModel> {
    model: &'a M,
    theta: &'a [f64],
    y: f64,
    prev: Option<&'a [f64]>,
    prev_cum: Option<&'a [f64]>,
    abc: Option<&'a AbcConfig>,
}

impl<M: StateSpaceModel> StepContext<'_, M> {
    fn propose(&self, ancestor: usize, rng: &mut SimRng) -> f64 {
        match self.prev {
            None => self.model.sample_initial_proposal(self.theta, self.y, rng),
            Some(prev) => self.model.sample_proposal(self.theta, self.y, prev[ancestor], rng),
        }
    }

    fn log_weight(&self, ancestor: usize, x: f64, rng: &mut SimRng) -> f64 {
        let local = match self.abc {
            Some(cfg) => abc_log_local_likelihood(self.model, self.theta, self.y, x, cfg, rng),
            None => self.model.log_observation(self.theta, x, self.y),
        };
        let lw = if self.model.is_bootstrap() || local == f64::NEG_INFINITY {
            local
        } else {
            match self.prev {
                None => {
                    self.model.log_initial(self.theta, x) + local
                        - self.model.log_initial_proposal(self.theta, self.y, x)
                }
                Some(prev) => {
                    let xp = prev[ancestor];
                    self.model.log_transition(self.theta, xp, x) + local
                        - self.model.log_proposal(self.theta, self.y, xp, x)
                }
            }
        };
        if lw.is_nan() {
            f64::NEG_INFINITY
        } else {
            lw
        }
    }

    fn redraw_ancestor(&self, current: usize, scope: RejectionScope, rng: &mut SimRng) -> usize {
        match (scope, self.prev_cum) {
            (RejectionScope::AncestorAndMove, Some(cum)) => draw_index(cum, rng),
            _ => current,
        }
    }

    fn first_attempt(&self, step_seed: u64, k: usize, ancestor: usize, fixed_x: Option<f64>) -> Slot {
        let mut rng = substream(step_seed, k as u64);
        let x = match fixed_x {
            Some(x) => x,
            None => self.propose(ancestor, &mut rng),
        };
        let log_weight = self.log_weight(ancestor, x, &mut rng);
        Slot { rng, ancestor, x, log_weight }
    }

    /// Replaces a pilot draw by a fresh one from the same ancestor, continuing the slot's stream.
    fn redraw(&self, mut slot: Slot) -> Slot {
        slot.x = self.propose(slot.ancestor, &mut slot.rng);
        slot.log_weight = self.log_weight(slot.ancestor, slot.x, &mut slot.rng);
        slot
    }

    fn settle(&self, mut slot: Slot, prc: Option<(&PrcConfig, f64)>) -> Settled {
        let Some((cfg, log_c)) = prc else {
            return Settled { ancestor: slot.ancestor, x: slot.x, log_weight: slot.log_weight, prc: None };
        };
        let anc0 = slot.ancestor;
        let outcome = prc_accept_loop::<_, _, std::convert::Infallible, _, _>(
            ((slot.ancestor, slot.x), slot.log_weight),
            log_c,
            cfg.max_attempts,
            |rng| {
                let a = self.redraw_ancestor(anc0, cfg.rejection_scope, rng);
                Ok((a, self.propose(a, rng)))
            },
            |&(a, x), rng| self.log_weight(a, x, rng),
            &mut slot.rng,
        )
        .unwrap_or_else(|e| match e {});
        let (ancestor, x) = outcome.state;
        let log_r = if log_c == f64::NEG_INFINITY || cfg.r_estimation_draws == 0 {
            0.0
        } else {
            let r = estimate_r(
                log_c,
                cfg.r_estimation_draws,
                |rng| {
                    let a = self.redraw_ancestor(ancestor, cfg.rejection_scope, rng);
                    let x = self.propose(a, rng);
                    self.log_weight(a, x, rng)
                },
                &mut slot.rng,
            )
            .expect("draw count checked above");
            r.ln()
        };
        Settled {
            ancestor,
            x,
            log_weight: corrected_log_weight(outcome.log_weight, log_c, log_r),
            prc: Some(PrcRecord {
                log_pre_weight: outcome.log_weight,
                log_r,
                attempts: outcome.attempts,
                capped: outcome.capped,
            }),
        }
    }
}

fn map_slots<T, U, F>(items: Vec<T>, parallel: bool, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(usize, T) -> U + Sync + Send,
{
    if parallel {
        items.into_par_iter().enumerate().map(|(k, t)| f(k, t)).collect()
    } else {
        items.into_iter().enumerate().map(|(k, t)| f(k, t)).collect()
    }
}

/// Shared SMC engine behind every filter entry point.
pub(crate) fn run_smc<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    y: &[f64],
    config: &FilterConfig,
    retained: Option<&[f64]>,
    rng: &mut SimRng,
) -> Result<ParticleSystem, FilterError> {
    config.validate()?;
    if y.is_empty() {
        return Err(FilterError::EmptyObservations);
    }
    if !model.in_support(theta) {
        return Err(FilterError::OutsideSupport(theta.to_vec()));
    }
    let n_part = config.n_particles;
    let len = y.len();
    let prc = config.active_prc();
    let pinned = retained.map(|_| n_part - 1);

    let mut sys = ParticleSystem {
        particles: Vec::with_capacity(len),
        ancestors: Vec::with_capacity(len.saturating_sub(1)),
        log_weights: Vec::with_capacity(len),
        norm_weights: Vec::with_capacity(len),
        log_increments: Vec::with_capacity(len),
        log_ml: f64::NEG_INFINITY,
        collapsed_at: None,
        steps: Vec::with_capacity(len),
        log_thresholds: Vec::with_capacity(len),
        prc_records: Vec::new(),
        retained_index: pinned,
    };

    for n in 0..len {
        let prev_cum = if n > 0 { Some(cumulative(&sys.norm_weights[n - 1])?) } else { None };
        let ancestors: Vec<usize> = if n == 0 {
            (0..n_part).collect()
        } else if let Some(pin) = pinned {
            let mut a = resample(&sys.norm_weights[n - 1], n_part - 1, ResamplingScheme::Multinomial, rng)?;
            a.push(pin);
            a
        } else {
            resample(&sys.norm_weights[n - 1], n_part, config.resampling, rng)?
        };
        let step_seed = next_seed(rng);
        let ctx = StepContext {
            model,
            theta,
            y: y[n],
            prev: if n > 0 { Some(sys.particles[n - 1].as_slice()) } else { None },
            prev_cum: prev_cum.as_deref(),
            abc: config.abc.as_ref(),
        };

        let slots: Vec<Slot> = map_slots(ancestors, config.parallel, |k, anc| {
            let fixed = match (pinned, retained) {
                (Some(pin), Some(path)) if k == pin => Some(path[n]),
                _ => None,
            };
            ctx.first_attempt(step_seed, k, anc, fixed)
        });

        let (log_c, slots) = match prc.map(|p| p.threshold_policy) {
            None | Some(ThresholdPolicy::Disabled) => (None, slots),
            Some(ThresholdPolicy::Fixed(c)) => (Some(c.ln()), slots),
            Some(ThresholdPolicy::Quantile(alpha)) => {
                // the first pass only sets c_n; PRC then starts from fresh draws so
                // that c_n is independent of the moves it screens
                let pilot: Vec<f64> = slots.iter().map(|s| s.log_weight).collect();
                let log_c = adapt_log_threshold(&pilot, alpha);
                (Some(log_c), map_slots(slots, config.parallel, |_, s| ctx.redraw(s)))
            }
        };
        let first_below = log_c.map_or(0, |c| slots.iter().filter(|s| s.log_weight < c).count());

        let settled: Vec<Settled> = map_slots(slots, config.parallel, |_, slot| {
            ctx.settle(slot, prc.zip(log_c))
        });

        let mut row_x = Vec::with_capacity(n_part);
        let mut row_lw = Vec::with_capacity(n_part);
        let mut row_anc = Vec::with_capacity(n_part);
        let mut records = Vec::new();
        for s in settled {
            row_x.push(s.x);
            row_lw.push(s.log_weight);
            row_anc.push(s.ancestor);
            if let Some(r) = s.prc {
                records.push(r);
            }
        }

        let log_increment = log_mean_exp(&row_lw);
        let mut norm = Vec::with_capacity(n_part);
        let ok = normalize_log_weights(&row_lw, &mut norm) && log_increment.is_finite();

        let mut log = StepLog {
            step: n,
            ess: if ok { ess(&norm) } else { 0.0 },
            log_increment,
            log_threshold: log_c,
            mean_attempts: 1.0,
            cap_hits: 0,
            first_attempt_below: first_below,
            r_regime: None,
            r_mean: 1.0,
            r_min: 1.0,
            r_max: 1.0,
            abc_zero_fraction: None,
            abc_mean_g: None,
            collapsed: !ok,
        };
        if let (Some(cfg), Some(c)) = (prc, log_c) {
            let m = records.len() as f64;
            log.mean_attempts = records.iter().map(|r| r.attempts as f64).sum::<f64>() / m;
            log.cap_hits = records.iter().filter(|r| r.capped).count();
            log.r_regime = Some(if c == f64::NEG_INFINITY {
                RRegime::Unity
            } else if cfg.r_estimation_draws == 0 {
                RRegime::Skipped
            } else {
                RRegime::Estimated
            });
            let rs = records.iter().map(|r| r.log_r.exp());
            log.r_mean = rs.clone().sum::<f64>() / m;
            log.r_min = rs.clone().fold(f64::INFINITY, f64::min);
            log.r_max = rs.fold(f64::NEG_INFINITY, f64::max);
        }
        if config.abc.is_some() {
            // weights carry g_abc times a proposal ratio; zero weights are zero g_abc
            let zeros = row_lw.iter().filter(|&&w| w == f64::NEG_INFINITY).count();
            log.abc_zero_fraction = Some(zeros as f64 / n_part as f64);
            log.abc_mean_g = Some(log_increment.exp());
        }

        if n > 0 {
            sys.ancestors.push(row_anc);
        }
        sys.particles.push(row_x);
        sys.log_weights.push(row_lw);
        sys.norm_weights.push(norm);
        sys.log_increments.push(log_increment);
        sys.log_thresholds.push(log_c.unwrap_or(f64::NEG_INFINITY));
        sys.steps.push(log);
        if prc.is_some() {
            sys.prc_records.push(records);
        }
        if !ok {
            sys.collapsed_at = Some(n);
            sys.log_ml = f64::NEG_INFINITY;
            return Ok(sys);
        }
    }
    sys.log_ml = sys.log_increments.iter().sum();
    Ok(sys)
}
