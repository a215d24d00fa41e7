//! Post-processing of chain output: posterior-mean paths, acceptance rates,
//! autocorrelation, effective sample size and freeze-run statistics.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("burn-in {burn_in} leaves no samples out of {available}")]
    BurnInTooLarge { burn_in: usize, available: usize },
    #[error("series of length {len} is too short for lag {max_lag}")]
    SeriesTooShort { len: usize, max_lag: usize },
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("paths have inconsistent lengths")]
    RaggedPaths,
}

/// Per-step mean of the paths after discarding the first `burn_in`.
pub fn mmse_path(paths: &[Vec<f64>], burn_in: usize) -> Result<Vec<f64>, DiagnosticsError> {
    if burn_in >= paths.len() {
        return Err(DiagnosticsError::BurnInTooLarge { burn_in, available: paths.len() });
    }
    let kept = &paths[burn_in..];
    let len = kept[0].len();
    if kept.iter().any(|p| p.len() != len) {
        return Err(DiagnosticsError::RaggedPaths);
    }
    let mut mean = vec![0.0; len];
    for p in kept {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let count = kept.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Acceptance rate in consecutive windows; a trailing partial window is kept.
pub fn acceptance_rate(flags: &[bool], window: usize) -> Result<Vec<f64>, DiagnosticsError> {
    if window == 0 {
        return Err(DiagnosticsError::ZeroWindow);
    }
    Ok(flags
        .chunks(window)
        .map(|c| c.iter().filter(|&&f| f).count() as f64 / c.len() as f64)
        .collect())
}

/// Sample autocorrelation at lags `0..=max_lag`, normalized by `n` (biased).
/// A constant series yields `1` at lag 0 and `0` elsewhere.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>, DiagnosticsError> {
    let n = series.len();
    if n <= max_lag {
        return Err(DiagnosticsError::SeriesTooShort { len: n, max_lag });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0 = dev.iter().map(|d| d * d).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        let mut out = vec![0.0; max_lag + 1];
        out[0] = 1.0;
        return Ok(out);
    }
    Ok((0..=max_lag)
        .map(|k| dev[..n - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0)
        .collect())
}

/// Effective sample size `n / (1 + 2 sum rho_k)`, summing autocorrelations
/// until the first non-positive one.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 3 {
        return n as f64;
    }
    let max_lag = (n - 1).min(1000);
    let Ok(acf) = autocorrelation(series, max_lag) else {
        return n as f64;
    };
    let tail: f64 = acf[1..].iter().take_while(|&&r| r > 0.0).sum();
    n as f64 / (1.0 + 2.0 * tail)
}

/// Lengths of maximal runs of bit-identical consecutive `(theta, path)` states.
pub fn freeze_run_lengths(thetas: &[Vec<f64>], paths: &[Vec<f64>]) -> Vec<usize> {
    assert_eq!(thetas.len(), paths.len(), "thetas and paths differ in length");
    let same = |i: usize| {
        thetas[i].iter().map(|v| v.to_bits()).eq(thetas[i - 1].iter().map(|v| v.to_bits()))
            && paths[i].iter().map(|v| v.to_bits()).eq(paths[i - 1].iter().map(|v| v.to_bits()))
    };
    let changed: Vec<bool> = (0..thetas.len()).map(|i| i == 0 || !same(i)).collect();
    run_lengths(&changed)
}

/// Run lengths from "state changed" flags (the first entry always starts a run).
pub fn run_lengths(changed: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    for (i, &c) in changed.iter().enumerate() {
        if c || i == 0 {
            runs.push(1);
        } else if let Some(last) = runs.last_mut() {
            *last += 1;
        }
    }
    runs
}

/// Histogram `run length -> count` of freeze runs.
pub fn freeze_runs(thetas: &[Vec<f64>], paths: &[Vec<f64>]) -> BTreeMap<usize, usize> {
    histogram(&freeze_run_lengths(thetas, paths))
}

pub fn histogram(runs: &[usize]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &r in runs {
        *h.entry(r).or_insert(0) += 1;
    }
    h
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Summary emitted next to a chain's CSV output.
#[derive(Debug, Clone, Serialize)]
pub struct ChainSummary {
    pub iterations: usize,
    pub acceptance_rate: f64,
    pub acceptance_by_window: Vec<f64>,
    pub window: usize,
    pub freeze_histogram: BTreeMap<usize, usize>,
    pub longest_freeze: usize,
    pub theta_names: Vec<String>,
    pub theta_mean: Vec<f64>,
    pub theta_ess: Vec<f64>,
    /// RMSE of the posterior-mean path against the true states, when known.
    pub mmse_rmse: Option<f64>,
}

pub fn summarize(
    thetas: &[Vec<f64>],
    accepted: &[bool],
    changed: &[bool],
    theta_names: Vec<String>,
    window: usize,
    mmse_rmse: Option<f64>,
) -> ChainSummary {
    let d = thetas.first().map_or(0, Vec::len);
    let cols: Vec<Vec<f64>> = (0..d).map(|i| thetas.iter().map(|t| t[i]).collect()).collect();
    let runs = run_lengths(changed);
    ChainSummary {
        iterations: thetas.len(),
        acceptance_rate: accepted.iter().filter(|&&a| a).count() as f64 / accepted.len().max(1) as f64,
        acceptance_by_window: acceptance_rate(accepted, window.max(1)).unwrap_or_default(),
        window,
        longest_freeze: runs.iter().copied().max().unwrap_or(0),
        freeze_histogram: histogram(&runs),
        theta_names,
        theta_mean: cols.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect(),
        theta_ess: cols.iter().map(|c| effective_sample_size(c)).collect(),
        mmse_rmse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mmse_of_single_path_is_the_path() {
        let p = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(mmse_path(&p, 0).unwrap(), p[0]);
        assert!(matches!(mmse_path(&p, 1), Err(DiagnosticsError::BurnInTooLarge { .. })));
    }

    #[test]
    fn acceptance_windows() {
        assert_eq!(acceptance_rate(&[true; 6], 3).unwrap(), vec![1.0, 1.0]);
        assert_eq!(acceptance_rate(&[false; 4], 2).unwrap(), vec![0.0, 0.0]);
        let alt: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        assert_eq!(acceptance_rate(&alt, 2).unwrap(), vec![0.5; 4]);
        assert!(acceptance_rate(&alt, 0).is_err());
    }

    #[test]
    fn acf_edge_cases() {
        assert_eq!(autocorrelation(&[2.0; 10], 3).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(autocorrelation(&[1.0, 2.0], 2).is_err());
        assert_eq!(autocorrelation(&[1.0, 3.0, 2.0], 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn freeze_runs_on_known_pattern() {
        let t = |v: f64| vec![v];
        let thetas = vec![t(1.0), t(1.0), t(2.0), t(2.0), t(2.0), t(3.0), t(1.0)];
        let paths = vec![vec![0.0]; 7];
        assert_eq!(freeze_run_lengths(&thetas, &paths), vec![2, 3, 1, 1]);
        let h = freeze_runs(&thetas, &paths);
        assert_eq!(h, BTreeMap::from([(1, 2), (2, 1), (3, 1)]));
        // a path change breaks the run even with equal theta
        let mut paths = paths;
        paths[1] = vec![5.0];
        assert_eq!(freeze_run_lengths(&thetas, &paths), vec![1, 1, 3, 1, 1]);
    }

    #[test]
    fn freeze_extremes() {
        let distinct: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert_eq!(freeze_run_lengths(&distinct, &distinct), vec![1; 5]);
        let frozen = vec![vec![1.0]; 9];
        assert_eq!(freeze_run_lengths(&frozen, &frozen), vec![9]);
    }

    #[test]
    fn ks_distance_basics() {
        assert_eq!(ks_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_distance(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0, 3.0, 4.0], &[2.5, 3.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
