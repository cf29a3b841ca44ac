use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use alrgmm::crossfit::{complement_rows, content_digest, make_partition, populate_cache, EstimatorCache, ExclusionKey};
use alrgmm::data::{Dataset, Mode, Observation};
use alrgmm::dgmm::{estimate, estimate_detailed, EstimatorConfig};
use alrgmm::simulation::{generate, monte_carlo, oracle_nuisance_error, replication_seeds, CasfDgp, Dgp, SelectionDgp};

fn casf_data(n: usize, seed: u64) -> Dataset {
    generate(&Dgp::Casf(CasfDgp::default()), n, seed).unwrap().dataset
}

#[test]
fn estimate_is_deterministic_given_seed() {
    let data = casf_data(400, 1);
    let cfg = EstimatorConfig::casf_default(1);
    let mut a = estimate(&data, &cfg, 9).unwrap();
    let mut b = estimate(&data, &cfg, 9).unwrap();
    a.timing = None;
    b.timing = None;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = estimate(&data, &cfg, 10).unwrap();
    assert_ne!(a.theta, c.theta);
}

#[test]
fn report_identities_hold() {
    let data = casf_data(500, 2);
    let r = estimate(&data, &EstimatorConfig::casf_default(1), 3).unwrap();
    assert!(r.theta.is_finite() && r.se > 0.0);
    assert_abs_diff_eq!(r.theta, r.theta_plugin + r.phi, epsilon = 1e-12);
    assert_abs_diff_eq!(r.phi, r.phi_first_step + r.phi_second_step, epsilon = 1e-12);
    assert_abs_diff_eq!(r.ci95[0], r.theta - 1.96 * r.se, epsilon = 1e-12);
    assert_abs_diff_eq!(r.ci95[1], r.theta + 1.96 * r.se, epsilon = 1e-12);
    assert_abs_diff_eq!(r.psi_at_theta, 0.0, epsilon = 1e-10);
    assert_eq!(r.folds.len(), 5);
    assert_eq!(r.folds.iter().map(|f| f.n_rows).sum::<usize>(), 500);
}

#[test]
fn zero_alpha_reduces_to_plugin() {
    let data = casf_data(300, 4);
    let mut cfg = EstimatorConfig::casf_default(1);
    cfg.force_zero_alpha = true;
    let r = estimate(&data, &cfg, 5).unwrap();
    assert_eq!(r.phi, 0.0);
    assert_eq!(r.theta, r.theta_plugin);
}

#[test]
fn selection_ape_runs_end_to_end() {
    let sim = generate(&Dgp::Selection(SelectionDgp::default()), 800, 6).unwrap();
    let art = estimate_detailed(&sim.dataset, &EstimatorConfig::ape_default(), 7).unwrap();
    assert!(art.report.theta.is_finite());
    assert!((art.report.theta - sim.theta0).abs() < 6.0 * art.report.se);
    assert_eq!(art.alpha1.len(), 5);
    assert_eq!(art.alpha2.len(), 5 + 10);
}

#[test]
fn shallow_nesting_variants_run() {
    let data = casf_data(400, 8);
    for depth in [1, 2] {
        let mut cfg = EstimatorConfig::casf_default(1);
        cfg.depth = depth;
        let art = estimate_detailed(&data, &cfg, 1).unwrap();
        assert_eq!(art.cache.count_at_depth(depth + 1), 0);
        assert!(art.cache.audit_leakage(&art.partition).unwrap() > 0);
        assert!(art.report.theta.is_finite());
    }
}

#[test]
fn too_many_folds_is_a_config_error() {
    let data = casf_data(20, 1);
    let mut cfg = EstimatorConfig::casf_default(1);
    cfg.folds = 50;
    let err = estimate(&data, &cfg, 1).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tiny_complements_name_the_fold_key() {
    let data = casf_data(25, 1);
    let err = estimate(&data, &EstimatorConfig::casf_default(1), 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("exclusion key {"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn monte_carlo_records_reproduce_single_runs() {
    let dgp = Dgp::Casf(CasfDgp::default());
    let cfg = EstimatorConfig::casf_default(1);
    let (s1, r1) = monte_carlo(&dgp, 300, 2, &cfg, 77).unwrap();
    let (s2, r2) = monte_carlo(&dgp, 300, 2, &cfg, 77).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(r1, r2);
    for rec in &r1 {
        assert_eq!((rec.data_seed, rec.estimator_seed), replication_seeds(77, rec.replication));
        let sim = generate(&dgp, 300, rec.data_seed).unwrap();
        let single = estimate(&sim.dataset, &cfg, rec.estimator_seed).unwrap();
        assert_eq!(Some(single.theta), rec.theta);
        assert_eq!(Some(single.se), rec.se);
    }
}

#[test]
fn cache_round_trips_through_disk() {
    let data = casf_data(300, 3);
    let cfg = EstimatorConfig::casf_default(1);
    let functional = cfg.build_functional(&data, 1).unwrap();
    let partition = make_partition(300, 5, 2).unwrap();
    let cache = populate_cache(&data, &partition, &cfg.nuisance_specs(), functional.as_ref(), 2, cfg.steps, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    let digest = content_digest(&[b"data", b"config"]);
    cache.save(&path, &digest).unwrap();
    let loaded = EstimatorCache::load(&path, &digest).unwrap().unwrap();
    assert_eq!(loaded.len(), cache.len());
    for key in ExclusionKey::all(5, 2) {
        assert_eq!(loaded.get(&key).unwrap().theta_tilde, cache.get(&key).unwrap().theta_tilde);
    }
    assert!(EstimatorCache::load(&path, "stale").unwrap().is_none());
    assert!(EstimatorCache::load(dir.path().join("absent.json"), &digest).unwrap().is_none());
}

#[test]
fn fitted_riesz_equal_to_truth_has_zero_error() {
    let sim = generate(&Dgp::Casf(CasfDgp::default()), 50, 1).unwrap();
    let points: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0 - 1.0, 0.3]).collect();
    let truth = sim.oracle.alpha2();
    assert_eq!(oracle_nuisance_error(truth, truth, &points), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_balanced_and_deterministic(n in 10usize..500, folds in 2usize..8, seed in any::<u64>()) {
        prop_assume!(folds <= n);
        let p = make_partition(n, folds, seed).unwrap();
        let sizes = p.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let again = make_partition(n, folds, seed).unwrap();
        prop_assert_eq!(p.assignment(), again.assignment());
    }

    #[test]
    fn complements_exclude_exactly_the_key(n in 20usize..300, seed in any::<u64>(), depth in 1usize..=3) {
        let p = make_partition(n, 5, seed).unwrap();
        for key in ExclusionKey::all(5, depth) {
            let rows = complement_rows(&p, &key).unwrap();
            let excluded = (0..n).filter(|&r| key.contains(p.fold_of(r))).count();
            prop_assert_eq!(rows.len() + excluded, n);
            prop_assert!(rows.iter().all(|&r| !key.contains(p.fold_of(r))));
        }
    }

    #[test]
    fn csv_round_trip_preserves_values(
        rows in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6, prop::collection::vec(-1e6f64..1e6, 3)), 1..40)
    ) {
        let obs: Vec<Observation> = rows.into_iter().map(|(y, d, z)| Observation::new(y, d, z)).collect();
        let data = Dataset::new(obs, vec![0], Mode::ControlFunction).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice(), &["d".to_string()], Mode::ControlFunction).unwrap();
        prop_assert_eq!(back.observations(), data.observations());
    }
}
