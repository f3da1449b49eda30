use entk::kernels::{GramMatrix, GramProvenance, KernelKind};
use entk::linalg::Dense;
use entk::solvers::{
    asymmetric_solve, fit_asymmetric, fit_symmetric, grid_search, operator_norm, predict,
    ridge_solve, SolveConfig, SolverLoss, Split, TargetEncoding,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn gram_from(
    features: &[Vec<f64>],
    rows: &[Vec<f64>],
    classes: usize,
    kind: KernelKind,
    row_base: u64,
) -> GramMatrix {
    // block-diagonal over classes: a linear kernel on explicit features
    let (n, m) = (features.len(), rows.len());
    let mut values = Dense::zeros(classes * m, classes * n);
    for c in 0..classes {
        for i in 0..m {
            for j in 0..n {
                let v: f64 = rows[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
                values.set(c * m + i, c * n + j, v);
            }
        }
    }
    let ids = |count: usize, base: u64| -> Vec<(u64, usize)> {
        (0..classes)
            .flat_map(|c| (0..count).map(move |i| (base + i as u64, c)))
            .collect()
    };
    GramMatrix {
        values,
        symmetric: row_base == 0,
        num_classes: classes,
        row_ids: ids(m, row_base),
        col_ids: ids(n, 0),
        kind,
        provenance: GramProvenance {
            params_hash: "p".into(),
            dataset_hash: "d".into(),
            col_dataset_hash: None,
            eps: None,
            seed: None,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn asymmetric_equals_ridge_on_identical_features(
        feats in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 5), 2..9),
        tests in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 5), 1..6),
        label_bits in proptest::collection::vec(0usize..2, 9),
        gamma in prop_oneof![Just(0.01), Just(0.1), Just(1.0), Just(10.0)],
    ) {
        let n = feats.len();
        let labels: Vec<usize> = label_bits[..n].to_vec();
        let k_sym = gram_from(&feats, &feats, 2, KernelKind::Sgd, 0);
        let k_asym = gram_from(&feats, &feats, 2, KernelKind::ASignGd, 0);
        let k_test = gram_from(&feats, &tests, 2, KernelKind::Sgd, 1000);
        let k_test_asym = gram_from(&feats, &tests, 2, KernelKind::ASignGd, 1000);
        let config = SolveConfig { encoding: TargetEncoding::PlusMinus, ..SolveConfig::default() };
        let op = operator_norm(&k_sym.values);
        prop_assume!(op > 1e-6);
        let sym = fit_symmetric(Split { gram: &k_sym, labels: &labels, f0: None }, 1.0 / (gamma * op), None, &config).unwrap();
        let asym = fit_asymmetric(Split { gram: &k_asym, labels: &labels, f0: None }, gamma, None, &config).unwrap();
        let alpha = &asym.alpha;
        let beta = asym.beta.as_ref().unwrap();
        for (a, b) in alpha.iter().zip(beta) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
        }
        let ps = predict(&k_test, &sym, None, None).unwrap();
        let pa = predict(&k_test_asym, &asym, None, None).unwrap();
        for (x, y) in ps.logits.iter().flatten().zip(pa.logits.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-7 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn ridge_matches_normal_equations(
        feats in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 2..8),
        y in proptest::collection::vec(-5.0f64..5.0, 8),
        lambda in 1e-3f64..10.0,
    ) {
        let n = feats.len();
        let k = gram_from(&feats, &feats, 1, KernelKind::Sgd, 0);
        let alpha = ridge_solve(&k.values, &y[..n], lambda).unwrap();
        let m = DMatrix::from_row_slice(n, n, k.values.as_slice()) + DMatrix::identity(n, n) * lambda;
        let want = m.lu().solve(&DVector::from_column_slice(&y[..n])).unwrap();
        for (a, b) in alpha.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn single_example_closed_form() {
    let (a, b) = asymmetric_solve(&Dense::from_row_major(1, 1, vec![1.0]), &[1.0], 0.5).unwrap();
    assert!((a[0] - 1.0 / 3.0).abs() <= 4.0 * f64::EPSILON);
    assert!((b[0] - 1.0 / 3.0).abs() <= 4.0 * f64::EPSILON);
}

#[test]
fn operator_norm_of_diagonal() {
    let k = Dense::from_row_major(3, 3, vec![2.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0]);
    assert!((operator_norm(&k) - 5.0).abs() < 1e-8);
}

#[test]
fn grid_search_separates_clusters() {
    let feats: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            if i < 4 {
                vec![1.0, 0.1 * i as f64]
            } else {
                vec![-1.0, 0.1 * i as f64]
            }
        })
        .collect();
    let labels: Vec<usize> = (0..8).map(|i| usize::from(i >= 4)).collect();
    let val: Vec<Vec<f64>> = vec![vec![0.9, 0.0], vec![-0.8, 0.3]];
    let k = gram_from(&feats, &feats, 2, KernelKind::Sgd, 0);
    let k_val = gram_from(&feats, &val, 2, KernelKind::Sgd, 1000);
    for loss in [SolverLoss::Ridge, SolverLoss::Logistic] {
        let config = SolveConfig {
            loss,
            ..SolveConfig::default()
        };
        let fit = grid_search(
            Split {
                gram: &k,
                labels: &labels,
                f0: None,
            },
            Split {
                gram: &k_val,
                labels: &[0, 1],
                f0: None,
            },
            None,
            &config,
        )
        .unwrap();
        assert_eq!(fit.validation_metrics.unwrap().accuracy, 1.0, "{loss:?}");
        assert_eq!(
            predict(&k_val, &fit, None, None).unwrap().decisions,
            vec![0, 1]
        );
    }
}
