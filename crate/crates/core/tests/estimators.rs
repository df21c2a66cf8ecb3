mod common;

use common::{exact_estimator_means, outcome_count};
use crossq::estimators::*;
use crossq::rng;
use proptest::prelude::*;
use rand::Rng;

fn study(name: &str) -> EstimatorStudy {
    let (_, text) = shipped_studies().into_iter().find(|(n, _)| *n == name).unwrap();
    EstimatorStudy::parse(text).unwrap()
}

#[test]
fn fair_coin_enumeration() {
    let s = study("fair_coins");
    assert_eq!(outcome_count(&s.dist, s.n_per_action), 16);
    let (single, split) = exact_estimator_means(&s.dist, s.n_per_action);
    assert!((single - 0.6875).abs() < 1e-15);
    assert!((split - 0.5).abs() < 1e-15);
}

#[test]
fn monte_carlo_matches_enumeration_on_every_study() {
    for (name, text) in shipped_studies() {
        let s = EstimatorStudy::parse(text).unwrap();
        let (single, split) = exact_estimator_means(&s.dist, s.n_per_action);
        for row in s.run(40_000, 3).unwrap() {
            let exact = if row.kind == EstimatorKind::Single { single } else { split };
            let z = (row.estimate.mean - exact) / row.estimate.std_error;
            assert!(z.abs() < 4.0, "{name} {:?} K={}: z = {z}", row.kind, row.k);
        }
    }
}

#[test]
fn asymmetric_studies_have_opposite_exact_biases() {
    for name in ["skewed_coins", "rare_jackpot"] {
        let s = study(name);
        assert!(s.is_asymmetric());
        let truth = s.dist.true_max_mean();
        let (single, split) = exact_estimator_means(&s.dist, s.n_per_action);
        assert!(single > truth, "{name}: single {single} vs {truth}");
        assert!(split < truth, "{name}: split {split} vs {truth}");
    }
}

#[test]
fn study_csv_schema() {
    let rows = study("fair_coins").run(100, 0).unwrap();
    let csv = study_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(STUDY_CSV_HEADER));
    assert_eq!(lines.count(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn two_set_cross_is_double(seed in 0u64..100_000, actions in 2usize..6, n in 1usize..5) {
        let mut r = rng::seeded(seed);
        let mut draw = || ActionSamples::new(
            (0..actions).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
        ).unwrap();
        let sets = vec![draw(), draw()];
        prop_assert_eq!(
            cross_estimate(&sets, 0, 1).unwrap(),
            double_estimate(&sets[0], &sets[1], Direction::ASelects).unwrap()
        );
        prop_assert_eq!(
            cross_estimate(&sets, 1, 0).unwrap(),
            double_estimate(&sets[0], &sets[1], Direction::BSelects).unwrap()
        );
    }
}
