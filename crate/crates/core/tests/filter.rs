use pmcmc::abc::{AbcConfig, AbcKernel};
use pmcmc::filter::*;
use pmcmc::models::*;
use pmcmc::numeric::rng_from_seed;
use pmcmc::oracle::{kalman_loglik, unbiasedness_check};
use pmcmc::prc::PrcConfig;
use proptest::prelude::*;

fn lg_data(len: usize, seed: u64) -> (LinearGaussianModel, Vec<f64>) {
    let m = linear_gaussian_model(LinearGaussianParams::default()).unwrap();
    let y = simulate(&m, &[0.9], len, seed).unwrap().observations;
    (m, y)
}

#[test]
fn likelihood_estimate_is_unbiased_on_a_short_series() {
    let rep = unbiasedness_check(&LinearGaussianParams::default(), 10, 50, 400, 3).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn optimal_proposal_gives_a_tighter_estimate() {
    let (m, y) = lg_data(25, 4);
    let exact = kalman_loglik(&m.base(), &y);
    let opt = m.clone().with_optimal_proposal(true);
    let cfg = FilterConfig::with_particles(100);
    let spread = |model: &LinearGaussianModel| {
        let errs: Vec<f64> = (0..100)
            .map(|s| run_filter(model, &[0.9], &y, &cfg, &mut rng_from_seed(s)).unwrap().log_ml - exact)
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64
    };
    assert!(spread(&opt) < spread(&m));
}

#[test]
fn resampling_frequencies_follow_the_weights() {
    let w = [0.5, 0.3, 0.2];
    for scheme in [ResamplingScheme::Multinomial, ResamplingScheme::Systematic] {
        let mut rng = rng_from_seed(9);
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            for i in resample(&w, 100, scheme, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for (c, p) in counts.iter().zip(w) {
            let f = *c as f64 / 100_000.0;
            assert!((f - p).abs() < 0.05 * p, "{scheme:?}: {f} vs {p}");
        }
    }
}

#[test]
fn resampling_rejects_bad_weights() {
    let mut rng = rng_from_seed(0);
    assert!(resample(&[0.0, 0.0], 3, ResamplingScheme::Multinomial, &mut rng).is_err());
    assert!(resample(&[0.5, f64::NAN], 3, ResamplingScheme::Multinomial, &mut rng).is_err());
    assert!(resample(&[0.5, -0.1], 3, ResamplingScheme::Systematic, &mut rng).is_err());
}

#[test]
fn zero_weight_particles_are_never_picked() {
    let mut rng = rng_from_seed(1);
    for scheme in [ResamplingScheme::Multinomial, ResamplingScheme::Systematic] {
        let idx = resample(&[0.0, 1.0, 0.0, 2.0, 0.0], 10_000, scheme, &mut rng).unwrap();
        assert!(idx.iter().all(|&i| i == 1 || i == 3));
    }
}

fn toy_system() -> ParticleSystem {
    // three steps, three particles, hand-built genealogy
    let particles = vec![vec![0.0, 1.0, 2.0], vec![10.0, 11.0, 12.0], vec![20.0, 21.0, 22.0]];
    let ancestors = vec![vec![2, 2, 0], vec![1, 0, 0]];
    let norm = vec![vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3], vec![0.6, 0.1, 0.3]];
    let log_weights: Vec<Vec<f64>> = norm.iter().map(|r| r.iter().map(|w: &f64| w.ln()).collect()).collect();
    ParticleSystem {
        particles,
        ancestors,
        log_increments: vec![0.0; 3],
        log_weights,
        norm_weights: norm,
        log_ml: 0.0,
        collapsed_at: None,
        steps: Vec::new(),
        log_thresholds: vec![f64::NEG_INFINITY; 3],
        prc_records: Vec::new(),
        retained_index: None,
    }
}

#[test]
fn sampled_trajectories_follow_final_weights_and_genealogy() {
    let sys = toy_system();
    let expected = [
        (vec![2.0, 11.0, 20.0], 0.6),
        (vec![2.0, 10.0, 21.0], 0.1),
        (vec![2.0, 10.0, 22.0], 0.3),
    ];
    let draws = 100_000;
    let mut rng = rng_from_seed(2);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let p = sample_trajectory(&sys, &mut rng).unwrap();
        let i = expected.iter().position(|(e, _)| *e == p).expect("path not in genealogy");
        counts[i] += 1;
    }
    for (c, (_, p)) in counts.iter().zip(expected) {
        let f = *c as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((f - p).abs() <= 3.0 * se, "{f} vs {p}");
    }
}

#[test]
fn conditional_smc_concentrates_on_an_exact_retained_path() {
    let params = LinearGaussianParams { obs_var: 1e-6, ..Default::default() };
    let m = linear_gaussian_model(params).unwrap();
    let sim = simulate(&m, &[0.9], 20, 6).unwrap();
    let cfg = FilterConfig::with_particles(50);
    let mut rng = rng_from_seed(3);
    let mut hits = 0;
    for _ in 0..200 {
        let sys = run_conditional_filter(&m, &[0.9], &sim.observations, &cfg, &sim.states, &mut rng).unwrap();
        let path = sample_trajectory(&sys, &mut rng).unwrap();
        // any competitor must itself sit within a few noise std of the data
        let gap = path.iter().zip(&sim.states).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 0.02, "{gap}");
        if path == sim.states {
            hits += 1;
        }
    }
    assert!(hits >= 180, "{hits}");
}

#[test]
fn conditional_smc_rejects_prc_and_bad_lengths() {
    let (m, y) = lg_data(5, 1);
    let mut rng = rng_from_seed(0);
    let cfg = FilterConfig { prc: Some(PrcConfig::fixed(0.1)), ..FilterConfig::with_particles(10) };
    assert!(run_conditional_filter(&m, &[0.9], &y, &cfg, &y, &mut rng).is_err());
    let cfg = FilterConfig::with_particles(10);
    assert!(matches!(
        run_conditional_filter(&m, &[0.9], &y, &cfg, &y[..3], &mut rng),
        Err(FilterError::RetainedLength { expected: 5, got: 3 })
    ));
}

#[test]
fn parallel_and_sequential_runs_are_bit_identical() {
    let (m, y) = lg_data(30, 8);
    let configs = [
        FilterConfig::with_particles(64),
        FilterConfig { resampling: ResamplingScheme::Systematic, ..FilterConfig::with_particles(64) },
        FilterConfig { prc: Some(PrcConfig::quantile(0.2)), ..FilterConfig::with_particles(64) },
        FilterConfig { abc: Some(AbcConfig::new(0.5, 5, AbcKernel::Indicator)), ..FilterConfig::with_particles(64) },
    ];
    for cfg in configs {
        let par = FilterConfig { parallel: true, ..cfg.clone() };
        let a = run_filter(&m, &[0.9], &y, &cfg, &mut rng_from_seed(21)).unwrap();
        let b = run_filter(&m, &[0.9], &y, &par, &mut rng_from_seed(21)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_ml.to_bits(), b.log_ml.to_bits());
    }
}

#[test]
fn invalid_inputs_are_errors() {
    let (m, y) = lg_data(5, 1);
    let mut rng = rng_from_seed(0);
    assert!(matches!(
        run_filter(&m, &[0.9], &[], &FilterConfig::default(), &mut rng),
        Err(FilterError::EmptyObservations)
    ));
    assert!(matches!(
        run_filter(&m, &[1.5], &y, &FilterConfig::default(), &mut rng),
        Err(FilterError::OutsideSupport(_))
    ));
    assert!(run_filter(&m, &[0.9], &y, &FilterConfig::with_particles(0), &mut rng).is_err());
}

#[test]
fn trace_has_one_row_per_particle_and_step() {
    let (m, y) = lg_data(4, 2);
    let sys = run_filter(&m, &[0.9], &y, &FilterConfig::with_particles(7), &mut rng_from_seed(0)).unwrap();
    let mut buf = Vec::new();
    sys.write_trace(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,k,x,weight,ancestor"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 28);
    assert!(rows[0].ends_with(','));
    assert!(!rows[7].ends_with(','));
    let mut log = Vec::new();
    sys.write_step_log(&mut log).unwrap();
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn particle_system_invariants(seed in 0u64..10_000, n in 1usize..40, len in 1usize..15) {
        let (m, y) = lg_data(len, seed);
        let sys = run_filter(&m, &[0.9], &y, &FilterConfig::with_particles(n), &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(sys.len(), len);
        prop_assert_eq!(sys.n_particles(), n);
        prop_assert_eq!(sys.ancestors.len(), len - 1);
        for row in &sys.norm_weights {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|w| *w >= 0.0));
        }
        for row in &sys.ancestors {
            prop_assert!(row.iter().all(|&a| a < n));
        }
        prop_assert!((sys.recompute_log_ml() - sys.log_ml).abs() < 1e-9);
        for s in &sys.steps {
            prop_assert!(s.ess >= 1.0 - 1e-9 && s.ess <= n as f64 + 1e-9);
        }
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil(ws in prop::collection::vec(0.0f64..1.0, 1..20), count in 1usize..200, seed in 0u64..1000) {
        prop_assume!(ws.iter().sum::<f64>() > 1e-6);
        let total: f64 = ws.iter().sum();
        let idx = resample(&ws, count, ResamplingScheme::Systematic, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(idx.len(), count);
        for (i, w) in ws.iter().enumerate() {
            let expect = w / total * count as f64;
            let got = idx.iter().filter(|&&j| j == i).count() as f64;
            // floor or ceil of the expected count
            prop_assert!((got - expect).abs() < 1.0 + 1e-9, "{} vs {}", got, expect);
        }
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn conditional_slot_holds_the_retained_path(seed in 0u64..10_000, n in 2usize..30) {
        let (m, y) = lg_data(12, seed);
        let retained: Vec<f64> = y.iter().map(|v| v * 0.5).collect();
        let sys = run_conditional_filter(&m, &[0.9], &y, &FilterConfig::with_particles(n), &retained, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(sys.retained_index, Some(n - 1));
        for (row, x) in sys.particles.iter().zip(&retained) {
            prop_assert_eq!(row[n - 1].to_bits(), x.to_bits());
        }
        for row in &sys.ancestors {
            prop_assert_eq!(row[n - 1], n - 1);
        }
    }
}
