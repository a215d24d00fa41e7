use nalgebra::DMatrix;
use pmcmc::filter::FilterConfig;
use pmcmc::models::*;
use pmcmc::numeric::rng_from_seed;
use pmcmc::samplers::*;
use pmcmc::StateSpaceModel;
use proptest::prelude::*;

fn lg_setup(len: usize) -> (LinearGaussianModel, Vec<f64>) {
    let m = linear_gaussian_model(LinearGaussianParams::default()).unwrap();
    let y = simulate(&m, &[0.9], len, 12).unwrap().observations;
    (m, y)
}

fn short_config(iterations: usize) -> ChainConfig {
    ChainConfig {
        iterations,
        filter: FilterConfig::with_particles(40),
        proposal: ProposalConfig::adaptive(vec![0.1], 50),
        init: InitConfig { theta: Some(vec![0.6]), ..Default::default() },
        ..Default::default()
    }
}

fn batch_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    DMatrix::from_fn(d, d, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1) as f64
    })
}

#[test]
fn hybrid_with_extreme_mix_replays_the_pure_kernels() {
    let (m, y) = lg_setup(15);
    let mut cfg = short_config(80);
    cfg.mix_prob = 0.0;
    assert_eq!(run_chain(Algorithm::Hybrid, &m, &y, &cfg, 4).unwrap().thetas, run_chain(Algorithm::Pg, &m, &y, &cfg, 4).unwrap().thetas);
    cfg.mix_prob = 1.0;
    let a = run_chain(Algorithm::Hybrid, &m, &y, &cfg, 4).unwrap();
    let b = run_chain(Algorithm::Pmmh, &m, &y, &cfg, 4).unwrap();
    assert_eq!(a.thetas, b.thetas);
    assert_eq!(a.paths, b.paths);
}

#[test]
fn hybrid_mixes_both_kinds() {
    let (m, y) = lg_setup(15);
    let cfg = ChainConfig { mix_prob: 0.3, ..short_config(300) };
    let out = run_chain(Algorithm::Hybrid, &m, &y, &cfg, 1).unwrap();
    let pmmh = out.records.iter().filter(|r| r.kind == StepKind::Pmmh).count();
    assert!(pmmh > 50 && pmmh < 140, "{pmmh}");
}

#[test]
fn pmmh_log_alpha_is_recomputable() {
    let (m, y) = lg_setup(20);
    let out = run_chain(Algorithm::Pmmh, &m, &y, &short_config(200), 9).unwrap();
    let mut prev = (out.initial.log_ml, out.initial.log_prior);
    for (i, r) in out.records.iter().enumerate() {
        if r.filter_ran {
            let expect = (r.proposed_log_ml + r.proposed_log_prior) - (prev.0 + prev.1);
            assert_eq!(r.log_alpha.to_bits(), expect.to_bits());
        } else {
            assert_eq!(r.log_alpha, f64::NEG_INFINITY);
            assert!(!out.accepted[i]);
        }
        if out.accepted[i] {
            assert_eq!(out.log_mls[i], r.proposed_log_ml);
        }
        prev = (out.log_mls[i], out.log_priors[i]);
    }
}

#[test]
fn pg_log_alpha_uses_the_complete_data_density() {
    let (m, y) = lg_setup(20);
    let out = run_chain(Algorithm::Pg, &m, &y, &short_config(100), 3).unwrap();
    let mut theta = out.initial.theta.clone();
    let mut path = out.initial.path.clone();
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.proposal_dim, 1);
        if out.accepted[i] {
            let expect = (r.proposed_log_prior + log_joint(&m, &out.thetas[i], &path, &y))
                - (m.log_prior(&theta) + log_joint(&m, &theta, &path, &y));
            assert!((r.log_alpha - expect).abs() < 1e-9);
        }
        theta = out.thetas[i].clone();
        path = out.paths[i].clone();
    }
}

#[test]
fn pmmh_dimension_is_path_plus_parameters() {
    let m = theta_logistic_model();
    let theta = ThetaLogisticParams::default().to_vec();
    let y = simulate(&m, &theta, 30, 1).unwrap().observations;
    let cfg = ChainConfig {
        iterations: 20,
        filter: FilterConfig::with_particles(30),
        proposal: ProposalConfig::adaptive(vec![0.02, 0.1, 10.0], 5),
        init: InitConfig { theta: Some(theta), ..Default::default() },
        ..Default::default()
    };
    let out = run_chain(Algorithm::Pmmh, &m, &y, &cfg, 0).unwrap();
    assert!(out.records.iter().all(|r| r.proposal_dim == 33));
}

#[test]
fn stored_states_stay_in_support_and_chains_are_reproducible() {
    let m = NonlinearGainModel::default();
    let y = simulate(&m, &[0.8], 25, 3).unwrap().observations;
    let cfg = ChainConfig {
        iterations: 150,
        filter: FilterConfig::with_particles(30),
        proposal: ProposalConfig::adaptive(vec![0.3], 40),
        ..Default::default()
    };
    for alg in [Algorithm::Pmmh, Algorithm::Pg, Algorithm::Hybrid] {
        let a = run_chain(alg, &m, &y, &cfg, 5).unwrap();
        assert!(a.thetas.iter().all(|t| m.in_support(t)));
        assert!(a.log_priors.iter().all(|l| l.is_finite()));
        let b = run_chain(alg, &m, &y, &cfg, 5).unwrap();
        assert_eq!((&a.thetas, &a.paths, &a.accepted), (&b.thetas, &b.paths, &b.accepted));
        assert_eq!(a.log_mls, b.log_mls);
    }
}

#[test]
fn path_thinning_and_csv_shape() {
    let (m, y) = lg_setup(6);
    let cfg = ChainConfig { path_thin: 4, ..short_config(10) };
    let out = run_chain(Algorithm::Pmmh, &m, &y, &cfg, 2).unwrap();
    assert_eq!(out.path_iters, vec![4, 8]);
    assert_eq!(out.paths_until(7).len(), 1);
    let mut buf = Vec::new();
    out.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,accepted,log_ml,log_prior,theta_1,path_1,path_2,path_3,path_4,path_5,path_6");
    assert_eq!(lines.len(), 11);
    assert!(lines.iter().all(|l| l.split(',').count() == 11));
    assert!(lines[1].ends_with(",,,,,,"));
    assert!(!lines[4].ends_with(','));
}

#[test]
fn invalid_configurations_are_rejected() {
    let (m, y) = lg_setup(5);
    let bad = [
        ChainConfig { iterations: 0, ..short_config(1) },
        ChainConfig { path_thin: 0, ..short_config(1) },
        ChainConfig { mix_prob: 1.5, ..short_config(1) },
        ChainConfig { proposal: ProposalConfig::random_walk(vec![0.1, 0.1]), ..short_config(1) },
        ChainConfig { init: InitConfig { theta: Some(vec![2.0]), ..Default::default() }, ..short_config(1) },
        ChainConfig { init: InitConfig { path: Some(vec![0.0; 3]), ..Default::default() }, ..short_config(1) },
    ];
    for cfg in bad {
        assert!(run_chain(Algorithm::Pmmh, &m, &y, &cfg, 0).is_err(), "{cfg:?}");
    }
}

#[test]
fn singular_history_falls_back_to_the_safety_component() {
    let cfg = ProposalConfig::adaptive(vec![1.0, 1.0], 3);
    let mut h = ThetaHistory::new(2);
    for _ in 0..10 {
        h.push(&[1.0, 2.0]);
    }
    assert!(matches!(proposal_covariance(&h, &cfg), ProposalCovariance::Mixture { adapted: None, .. }));
    let mut rng = rng_from_seed(0);
    let draws: Vec<Vec<f64>> = (0..20_000).map(|_| am_propose(&[1.0, 2.0], &h, &cfg, &mut rng)).collect();
    let cov = batch_covariance(&draws);
    // safety variance 0.1^2 / d
    assert!((cov[(0, 0)] - 0.005).abs() < 0.0005 && (cov[(1, 1)] - 0.005).abs() < 0.0005);
}

#[test]
fn adapted_proposal_covariance_follows_the_mixture() {
    let cfg = ProposalConfig::adaptive(vec![1.0], 2);
    let mut h = ThetaHistory::new(1);
    let mut rng = rng_from_seed(1);
    for _ in 0..5000 {
        h.push(&[pmcmc::numeric::standard_normal(&mut rng) * 2.0]);
    }
    let emp = h.covariance().unwrap()[(0, 0)];
    let draws: Vec<Vec<f64>> = (0..200_000).map(|_| am_propose(&[0.0], &h, &cfg, &mut rng)).collect();
    let var = batch_covariance(&draws)[(0, 0)];
    let expect = 0.95 * 2.38 * 2.38 * emp + 0.05 * 0.01;
    assert!((var - expect).abs() < 0.02 * expect, "{var} vs {expect}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn running_covariance_matches_batch(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..60)) {
        let mut h = ThetaHistory::new(3);
        for r in &rows {
            h.push(r);
        }
        let run = h.covariance().unwrap();
        let batch = batch_covariance(&rows);
        for (a, b) in run.iter().zip(batch.iter()) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn pre_adaptation_proposals_use_the_initial_diagonal(seed in 0u64..1000, n in 0usize..9) {
        let cfg = ProposalConfig::adaptive(vec![0.5, 0.0], 10);
        let mut h = ThetaHistory::new(2);
        for i in 0..n {
            h.push(&[i as f64, 1.0]);
        }
        let p = am_propose(&[3.0, 4.0], &h, &cfg, &mut rng_from_seed(seed));
        prop_assert_eq!(p[1], 4.0);
    }
}
