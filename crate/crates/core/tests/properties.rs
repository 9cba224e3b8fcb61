use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use hse_hqmm::data::{parse_csv, to_csv, SequenceDataset};
use hse_hqmm::features::{seeded_rng, FeatureMap, RffMap};
use hse_hqmm::inference::{nw_condition, BeliefWeights};
use hse_hqmm::io::{config_to_text, model_from_text, model_to_text, parse_config};
use hse_hqmm::model::{random_isometry_tensor, FilterState, HqmmConfig, HqmmModel, Mode};
use hse_hqmm::quantum::{
    kron, partial_trace, project_to_density, project_to_simplex, random, unvectorize, validate_density, vectorize,
    SubsystemShape,
};

fn square(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

fn isometry_model(seed: u64) -> HqmmModel {
    let mut rng = seeded_rng(seed);
    let tensor = random_isometry_tensor(4, 10, &mut rng);
    let psi = random::real_pure_state(4, &mut rng).amplitudes().clone();
    let map = FeatureMap::rff(RffMap::sample(1, 10, 0.8, seed).unwrap());
    let samples = DMatrix::from_fn(25, 1, |i, _| -1.2 + 0.1 * i as f64);
    HqmmModel::from_tensor(tensor, psi, map, samples).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_projection_is_a_distribution(v in prop::collection::vec(-5.0..5.0f64, 1..8)) {
        let p = project_to_simplex(&v);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(project_to_simplex(&p).len(), p.len());
    }

    #[test]
    fn density_projection_is_valid_and_idempotent(m in square(4)) {
        let rho = project_to_density(&m).unwrap();
        prop_assert!(validate_density(&rho, 1e-9, true).is_ok());
        let again = project_to_density(&rho).unwrap();
        prop_assert!((again - &rho).amax() < 1e-9);
    }

    #[test]
    fn partial_trace_recovers_factors(seed in 0u64..10_000, a in 1usize..4, b in 1usize..4) {
        let mut rng = seeded_rng(seed);
        let ra = random::real_density(a, a, &mut rng).into_entries();
        let rb = random::real_density(b, 1, &mut rng).into_entries();
        let joint = kron(&ra, &rb);
        let shape = SubsystemShape::bipartite(a, b).unwrap();
        prop_assert!((partial_trace(&joint, &shape, &[0]).unwrap() - &ra).amax() < 1e-12);
        prop_assert!((partial_trace(&joint, &shape, &[1]).unwrap() - &rb).amax() < 1e-12);
    }

    #[test]
    fn vectorize_round_trips(m in square(3)) {
        prop_assert_eq!(unvectorize(&vectorize(&m)).unwrap(), m);
    }

    #[test]
    fn rff_features_have_unit_norm_and_symmetric_kernel(
        x in prop::collection::vec(-3.0..3.0f64, 2),
        y in prop::collection::vec(-3.0..3.0f64, 2),
        seed in 0u64..1000,
    ) {
        let map = RffMap::sample(2, 64, 1.3, seed).unwrap();
        let (fx, fy) = (map.embed(&x).unwrap(), map.embed(&y).unwrap());
        prop_assert!((fx.norm() - 1.0).abs() < 1e-12);
        prop_assert!((fx.dot(&fy) - fy.dot(&fx)).abs() < 1e-15);
        prop_assert!(fx.dot(&fy).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn nw_weights_are_normalized(
        alpha in prop::collection::vec(0.01..1.0f64, 2..10),
        k in prop::collection::vec(0.0..1.0f64, 10),
    ) {
        let n = alpha.len();
        let s: f64 = alpha.iter().sum();
        let prior = BeliefWeights::new(DVector::from_iterator(n, alpha.iter().map(|a| a / s))).unwrap();
        let col = DVector::from_iterator(n, k.iter().take(n).copied());
        if let Ok(post) = nw_condition(&prior, &col) {
            prop_assert!((post.sum() - 1.0).abs() < 1e-12);
            for i in 0..n {
                prop_assert!(col[i] > 0.0 || post.alpha()[i] == 0.0);
            }
        }
    }

    #[test]
    fn csv_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 3), 1..20)) {
        let seq = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let ds = SequenceDataset::new("p", vec![seq]).unwrap();
        let back = parse_csv(&to_csv(&ds), "p").unwrap();
        prop_assert_eq!(back.sequences(), ds.sequences());
    }

    #[test]
    fn config_round_trips(
        d in 1usize..5000,
        lambda in 1e-9..10.0f64,
        window in 1usize..30,
        epochs in 0usize..100,
        seed in any::<u64>(),
        mixed in any::<bool>(),
    ) {
        let cfg = HqmmConfig {
            feature_count: d,
            lambda,
            window,
            epochs,
            seed,
            mode: if mixed { Mode::Mixed } else { Mode::Pure },
            ..HqmmConfig::default()
        };
        prop_assert_eq!(parse_config(&config_to_text(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn isometry_filtering_keeps_unit_norm(seed in 0u64..500, ys in prop::collection::vec(-1.5..1.5f64, 1..30)) {
        let model = isometry_model(seed);
        let mut state = model.initial_filter_state();
        for y in ys {
            let (f, _) = model.observation_density_clamped(&state, &[y]).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            state = model.filter_step(&state, &[y]).unwrap();
            prop_assert!(state.validate(1e-9).is_ok());
        }
    }

    #[test]
    fn density_states_stay_valid_after_transition(seed in 0u64..500) {
        let model = isometry_model(seed).lift_to_mixed().unwrap();
        let mut rng = seeded_rng(seed + 1);
        let mut state = FilterState::density(random::real_density(4, 2, &mut rng).entries());
        for _ in 0..5 {
            state = model.transition_step(&state).unwrap();
            prop_assert!(state.validate(1e-9).is_ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_text_round_trips(seed in 0u64..1000) {
        let model = isometry_model(seed);
        prop_assert_eq!(model_from_text(&model_to_text(&model)).unwrap(), model);
    }
}
