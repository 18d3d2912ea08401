use mclt::covariance::{decompose, project_structure, structured_criterion, ScatterSet};
use mclt::scalar::{log_logistic, logistic};
use mclt::selection::adjusted_rand_index_exact;
use mclt::{
    adjusted_rand_index, count_free_parameters, fit, loglik_quadrature, BinaryDataset, FitOptions,
    CovarianceStructure, Model, ModelConfig,
};
use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use proptest::prelude::*;

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| {
        let a = DMatrix::from_vec(d, d, v);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.2
    })
}

fn scatter_set(g: usize, d: usize) -> impl Strategy<Value = ScatterSet<f64>> {
    (prop::collection::vec(spd(d), g), prop::collection::vec(1.0..50.0f64, g))
        .prop_map(|(s, n)| ScatterSet::new(s, n).unwrap())
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn small_model(m: usize) -> impl Strategy<Value = Model> {
    (
        prop::collection::vec(-1.5..1.5f64, m * 2),
        prop::collection::vec(-1.0..1.0f64, 4),
        spd(2),
        spd(2),
        0.2..0.8f64,
    )
        .prop_map(move |(w, mu, s1, s2, e)| Model {
            w: DMatrix::from_row_slice(m, 2, &w),
            eta: DVector::from_vec(vec![e, 1.0 - e]),
            mu: vec![DVector::from_vec(mu[..2].to_vec()), DVector::from_vec(mu[2..].to_vec())],
            sigma: vec![s1, s2],
            structure: CovarianceStructure::VVV,
            block: None,
        })
}

fn dataset(n: usize, m: usize) -> impl Strategy<Value = BinaryDataset> {
    prop::collection::vec(prop::collection::vec(0u8..2, m), n)
        .prop_map(|rows| BinaryDataset::from_rows(&rows).unwrap())
}

/// Pair counting straight from the definition.
fn brute_ari(a: &[usize], b: &[usize]) -> Ratio<i128> {
    let n = a.len();
    let (mut both, mut in_a, mut in_b) = (0i128, 0i128, 0i128);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += i128::from(sa && sb);
            in_a += i128::from(sa);
            in_b += i128::from(sb);
        }
    }
    let pairs = (n * (n - 1) / 2) as i128;
    let expected = Ratio::new(in_a * in_b, pairs);
    let max = Ratio::new(in_a + in_b, 2);
    if max == expected {
        return Ratio::from_integer(if Ratio::from_integer(both) == expected { 1 } else { 0 });
    }
    (Ratio::from_integer(both) - expected) / (max - expected)
}

proptest! {
    #[test]
    fn logistic_is_symmetric(x in -700.0..700.0f64) {
        let s = logistic(x);
        prop_assert!((s + logistic(-x) - 1.0).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((log_logistic(x) - log_logistic(-x) - x).abs() < 1e-9 * (1.0 + x.abs()));
    }

    #[test]
    fn parameter_count_grows_with_items(g in 1usize..6, d in 1usize..4, m in 2usize..60, block in any::<bool>()) {
        for s in CovarianceStructure::ALL {
            let c = ModelConfig::new(g, d, s).with_block_effect(block);
            let k = count_free_parameters(&c, m, 5);
            prop_assert!(k < count_free_parameters(&c, m + 1, 5));
            let full = count_free_parameters(&ModelConfig::new(g, d, CovarianceStructure::VVV).with_block_effect(block), m, 5);
            let least = count_free_parameters(&ModelConfig::new(g, d, CovarianceStructure::EII).with_block_effect(block), m, 5);
            prop_assert!(least <= k && k <= full);
        }
    }

    #[test]
    fn ari_is_symmetric_and_label_free(a in labels(15, 4), b in labels(15, 3), shift in 1usize..7) {
        let ab = adjusted_rand_index_exact(&a, &b).unwrap();
        prop_assert_eq!(ab, adjusted_rand_index_exact(&b, &a).unwrap());
        let renamed: Vec<usize> = a.iter().map(|x| (x + shift) * 11).collect();
        prop_assert_eq!(ab, adjusted_rand_index_exact(&renamed, &b).unwrap());
        prop_assert_eq!(adjusted_rand_index(&a, &renamed).unwrap(), 1.0);
    }

    #[test]
    fn ari_matches_pair_counting(n in 2usize..13, seed in prop::collection::vec(0usize..4, 24)) {
        let a = &seed[..n];
        let b = &seed[12..12 + n];
        prop_assert_eq!(adjusted_rand_index_exact(a, b).unwrap(), brute_ari(a, b));
    }

    #[test]
    fn decomposition_recombines(s in spd(3)) {
        let dec = decompose(&s);
        prop_assert!((dec.shape.iter().product::<f64>() - 1.0).abs() < 1e-10);
        let back = &dec.orientation * DMatrix::from_diagonal(&dec.shape) * dec.orientation.transpose() * dec.volume;
        prop_assert!((back - &s).abs().max() < 1e-10 * s.abs().max());
    }

    #[test]
    fn projection_is_idempotent(set in scatter_set(3, 2)) {
        use CovarianceStructure::*;
        for s in CovarianceStructure::ALL {
            let once = project_structure(&set, s).unwrap().sigma;
            let again_set = ScatterSet::new(once.clone(), set.counts().to_vec()).unwrap();
            let twice = project_structure(&again_set, s).unwrap().sigma;
            if matches!(s, VEI | VEE | VEV | EVE | VVE) {
                // alternating estimators stop on a relative criterion change
                let a = structured_criterion(&again_set, &once).unwrap();
                let b = structured_criterion(&again_set, &twice).unwrap();
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} not idempotent", s);
            } else {
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs().max() < 1e-9 * a.abs().max(), "{} not idempotent", s);
                }
            }
        }
    }

    #[test]
    fn nested_structures_fit_no_better(set in scatter_set(3, 3)) {
        use CovarianceStructure::*;
        let crit = |s| structured_criterion(&set, &project_structure(&set, s).unwrap().sigma).unwrap();
        let tol = 1e-6 * crit(EII).abs().max(1.0);
        for (general, special) in [(VVV, EEE), (EEE, EEI), (EEI, EII), (VVV, VVI), (VVI, VII), (VII, EII), (VVI, EEI), (EEV, EEE)] {
            prop_assert!(crit(general) >= crit(special) - tol, "{} below {}", general, special);
        }
    }

    #[test]
    fn quadrature_loglik_is_gauge_invariant(model in small_model(5), data in dataset(12, 5), t in prop::collection::vec(-1.0..1.0f64, 4)) {
        let t = DMatrix::from_vec(2, 2, t) + DMatrix::identity(2, 2) * 1.5;
        let moved = model.gauge_transform(&t).unwrap();
        let a = loglik_quadrature(&model, &data, 24).unwrap();
        let b = loglik_quadrature(&moved, &data, 24).unwrap();
        prop_assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn quadrature_grid_symmetries_are_exact(model in small_model(4), data in dataset(10, 4), c in 0.3..3.0f64, flip in any::<bool>(), swap in any::<bool>()) {
        // scaled signed permutations map the node grid onto itself
        let mut t = DMatrix::from_diagonal(&DVector::from_vec(vec![c, if flip { -c } else { c }]));
        if swap {
            t.swap_rows(0, 1);
        }
        let moved = model.gauge_transform(&t).unwrap();
        let a = loglik_quadrature(&model, &data, 10).unwrap();
        let b = loglik_quadrature(&moved, &data, 10).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fitting_is_deterministic(data in dataset(40, 6), seed in 0u64..1000) {
        let config = ModelConfig::new(2, 1, CovarianceStructure::VII);
        let options = FitOptions { starts: 3, seed, max_iterations: 200, ..FitOptions::default() };
        let a = fit(&data, &config, &options).unwrap();
        let b = fit(&data, &config, &FitOptions { parallel: false, ..options }).unwrap();
        prop_assert_eq!(a.model, b.model);
        prop_assert_eq!(a.diagnostics.loglik_trace, b.diagnostics.loglik_trace);
    }
}
