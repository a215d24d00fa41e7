//! Log-space arithmetic and random-stream plumbing shared by the filters and samplers.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Random stream used throughout the crate. Seedable and cheap to fork,
/// which is what the per-particle substreams need.
pub type SimRng = Xoshiro256PlusPlus;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Creates the master stream for a run.
pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the substream for `index` under a step seed. The result depends only
/// on `(step_seed, index)`, so particles can be processed in any order or in
/// parallel without changing the draws.
pub fn substream(step_seed: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(step_seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Draws a fresh step seed from a master stream.
pub fn next_seed<R: RngCore + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Log-density of `Normal(mean, var)` at `x`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log of `sum(exp(v))`, with the maximum factored out. Returns `-inf` for an
/// empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log of the arithmetic mean of `exp(v)`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    log_sum_exp(values) - (values.len() as f64).ln()
}

/// Normalizes log-weights into `out`. Returns `false` (leaving `out` uniform)
/// when every weight is zero.
pub fn normalize_log_weights(log_weights: &[f64], out: &mut Vec<f64>) -> bool {
    out.clear();
    let n = log_weights.len();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        out.resize(n, 1.0 / n as f64);
        return false;
    }
    out.extend(log_weights.iter().map(|&lw| (lw - max).exp()));
    let total: f64 = out.iter().sum();
    for w in out.iter_mut() {
        *w /= total;
    }
    true
}
