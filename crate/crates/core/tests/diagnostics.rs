use pmcmc::diagnostics::*;
use pmcmc::numeric::{rng_from_seed, standard_normal};
use proptest::prelude::*;

#[test]
fn white_noise_acf_stays_in_band() {
    let mut rng = rng_from_seed(3);
    let n = 20_000;
    let x: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let acf = autocorrelation(&x, 20).unwrap();
    assert_eq!(acf[0], 1.0);
    let band = 3.0 / (n as f64).sqrt();
    let outside = acf[1..].iter().filter(|r| r.abs() >= band).count();
    assert!(outside <= 1, "{acf:?}");
}

#[test]
fn ar1_acf_at_lag_one() {
    let mut rng = rng_from_seed(4);
    let n = 50_000;
    let mut x = vec![0.0; n];
    for i in 1..n {
        x[i] = 0.9 * x[i - 1] + standard_normal(&mut rng);
    }
    let acf = autocorrelation(&x, 2).unwrap();
    // variance of the lag-1 sample autocorrelation of an AR(1): (1 - phi^2) / n
    let band = 3.0 * ((1.0 - 0.81) / n as f64).sqrt();
    assert!((acf[1] - 0.9).abs() < band, "{}", acf[1]);
    let ess = effective_sample_size(&x);
    // n (1 - phi) / (1 + phi) for an AR(1)
    assert!(ess > 0.5 * n as f64 * 0.1 / 1.9 && ess < 2.0 * n as f64 * 0.1 / 1.9, "{ess}");
}

#[test]
fn mmse_of_symmetric_perturbations_recovers_the_centre() {
    let centre: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
    let mut rng = rng_from_seed(5);
    let mut paths = Vec::new();
    for _ in 0..2000 {
        let e: Vec<f64> = (0..10).map(|_| standard_normal(&mut rng) * 0.5).collect();
        paths.push(centre.iter().zip(&e).map(|(c, d)| c + d).collect::<Vec<_>>());
        paths.push(centre.iter().zip(&e).map(|(c, d)| c - d).collect::<Vec<_>>());
    }
    let m = mmse_path(&paths, 0).unwrap();
    for (a, b) in m.iter().zip(&centre) {
        assert!((a - b).abs() < 1e-12);
    }
    // random (unpaired) perturbations: within 3 SE
    let unpaired: Vec<Vec<f64>> = paths.iter().step_by(2).cloned().collect();
    let m = mmse_path(&unpaired, 0).unwrap();
    let se = 0.5 / (unpaired.len() as f64).sqrt();
    for (a, b) in m.iter().zip(&centre) {
        assert!((a - b).abs() <= 3.0 * se + 1e-12);
    }
}

#[test]
fn mmse_errors() {
    assert!(mmse_path(&[vec![1.0, 2.0], vec![1.0]], 0).is_err());
    assert!(mmse_path(&[], 0).is_err());
    assert_eq!(mmse_path(&[vec![9.0], vec![1.0], vec![3.0]], 1).unwrap(), vec![2.0]);
}

#[test]
fn summary_collects_chain_statistics() {
    let thetas = vec![vec![1.0], vec![1.0], vec![2.0], vec![3.0]];
    let changed = [true, false, true, true];
    let s = summarize(&thetas, &[true, false, true, true], &changed, vec!["a".into()], 2, Some(0.1));
    assert_eq!(s.iterations, 4);
    assert_eq!(s.acceptance_rate, 0.75);
    assert_eq!(s.acceptance_by_window, vec![0.5, 1.0]);
    assert_eq!(s.longest_freeze, 2);
    assert_eq!(s.theta_mean, vec![1.75]);
    let json = serde_json::to_string(&s).unwrap();
    assert!(json.contains("\"freeze_histogram\":{\"1\":2,\"2\":1}"), "{json}");
}

proptest! {
    #[test]
    fn mmse_ignores_sample_order(paths in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..30), seed in 0u64..100) {
        let mut shuffled = paths.clone();
        let mut rng = rng_from_seed(seed);
        for i in (1..shuffled.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            shuffled.swap(i, j);
        }
        let a = mmse_path(&paths, 0).unwrap();
        let b = mmse_path(&shuffled, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn freeze_runs_partition_the_chain(values in prop::collection::vec(0u8..3, 1..200)) {
        let thetas: Vec<Vec<f64>> = values.iter().map(|&v| vec![f64::from(v)]).collect();
        let paths = vec![vec![0.0]; thetas.len()];
        let runs = freeze_run_lengths(&thetas, &paths);
        prop_assert_eq!(runs.iter().sum::<usize>(), thetas.len());
        let hist = freeze_runs(&thetas, &paths);
        prop_assert_eq!(hist.iter().map(|(l, c)| l * c).sum::<usize>(), thetas.len());
    }

    #[test]
    fn acceptance_windows_average_back(flags in prop::collection::vec(any::<bool>(), 1..100), w in 1usize..10) {
        let rates = acceptance_rate(&flags, w).unwrap();
        let total: f64 = rates.iter().zip(flags.chunks(w)).map(|(r, c)| r * c.len() as f64).sum();
        prop_assert!((total - flags.iter().filter(|&&f| f).count() as f64).abs() < 1e-9);
    }

    #[test]
    fn ks_distance_is_a_bounded_symmetric_statistic(a in prop::collection::vec(-3.0f64..3.0, 1..50), b in prop::collection::vec(-3.0f64..3.0, 1..50)) {
        let d = ks_distance(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - ks_distance(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(ks_distance(&a, &a), 0.0);
    }
}
