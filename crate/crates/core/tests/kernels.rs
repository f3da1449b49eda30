use entk::data::{Dataset, Example};
use entk::kernels::{
    compute_features, cross_gram, gram, kernel_between, kernel_relative_distance, FeatureMode,
    GramMatrix, KernelKind,
};
use entk::linalg::Dense;
use entk::netcore::{init_network, per_example_gradient, Activation, MuPConfig, NetworkParams};
use entk::optim::OptimizerKind;
use entk::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn net(classes: usize, seed: u64) -> NetworkParams {
    init_network(
        &MuPConfig::new(7, 2, 3, classes, Activation::Tanh, OptimizerKind::Sgd).unwrap(),
        seed,
    )
    .unwrap()
}

fn dataset(points: &[Vec<f64>]) -> Dataset {
    Dataset::new(
        points
            .iter()
            .enumerate()
            .map(|(i, x)| Example {
                id: 100 + i as u64,
                label: 0,
                input: x.clone(),
            })
            .collect(),
    )
}

fn sign(x: f64, eps: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x / (x.abs() + eps)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gram_matches_double_loop(
        points in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..6),
        classes in 1usize..4,
        seed in 0u64..100,
        eps in 0.0f64..1e-2,
    ) {
        let model = net(classes, seed);
        let data = dataset(&points);
        let logits: Vec<usize> = (0..classes).collect();
        let n = data.len();
        let grads: Vec<Vec<Vec<f64>>> = (0..classes)
            .map(|c| data.examples.iter().map(|e| per_example_gradient(&model, e.id, &e.input, c).unwrap().values).collect())
            .collect();
        for kind in [KernelKind::Sgd, KernelKind::SignGd, KernelKind::ASignGd] {
            let k = kernel_between(&model, &data, &data, &logits, kind, Some(eps)).unwrap();
            for c in 0..classes {
                for i in 0..n {
                    for c2 in 0..classes {
                        for j in 0..n {
                            let (gi, gj) = (&grads[c][i], &grads[c2][j]);
                            let want: f64 = gi.iter().zip(gj).map(|(&a, &b)| match kind {
                                KernelKind::Sgd => a * b,
                                KernelKind::SignGd => sign(a, eps) * sign(b, eps),
                                KernelKind::ASignGd => a * sign(b, eps),
                            }).sum();
                            prop_assert!((k.get(c * n + i, c2 * n + j) - want).abs() <= 1e-10 * want.abs().max(1.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_kernels_are_psd(
        points in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 2..7),
        seed in 0u64..100,
    ) {
        let model = net(2, seed);
        let data = dataset(&points);
        for kind in [KernelKind::Sgd, KernelKind::SignGd] {
            let k = kernel_between(&model, &data, &data, &[0, 1], kind, None).unwrap();
            prop_assert_eq!(k.max_abs_asymmetry(), 0.0);
            let m = DMatrix::from_row_slice(k.rows(), k.cols(), k.values.as_slice());
            let scale = m.abs().max().max(1.0);
            for ev in m.symmetric_eigenvalues().iter() {
                prop_assert!(*ev >= -1e-10 * scale);
            }
        }
    }
}

#[test]
fn cross_gram_agrees_with_feature_gram() {
    let model = net(3, 1);
    let train = dataset(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, -1.0],
        vec![0.5, 0.5, 0.5],
    ]);
    let test = dataset(&[vec![-1.0, 2.0, 0.3], vec![0.2, 0.1, 0.0]]);
    let logits = [0, 1, 2];
    for kind in [KernelKind::Sgd, KernelKind::SignGd, KernelKind::ASignGd] {
        let plain = compute_features(&model, &train, &logits, FeatureMode::Plain).unwrap();
        let cols = if kind.col_mode_is_sign() {
            plain.to_sign(Some(1e-4)).unwrap()
        } else {
            plain.clone()
        };
        let rows_test = compute_features(&model, &test, &logits, FeatureMode::Plain).unwrap();
        let rows = if kind.row_mode_is_sign() {
            rows_test.to_sign(Some(1e-4)).unwrap()
        } else {
            rows_test
        };
        let direct = gram(&rows, &cols, kind).unwrap();
        let streamed = cross_gram(&model, &test, &cols, kind).unwrap();
        assert_eq!(direct.row_ids, streamed.row_ids);
        let d = kernel_relative_distance(&streamed.values, &direct.values).unwrap();
        assert!(d.per_entry_max < 1e-12, "{kind:?}: {d:?}");
    }
}

#[test]
fn mixed_feature_modes_are_rejected() {
    let model = net(1, 2);
    let data = dataset(&[vec![1.0, 2.0, 3.0]]);
    let plain = compute_features(&model, &data, &[0], FeatureMode::Plain).unwrap();
    let signed = plain.to_sign(None).unwrap();
    assert!(matches!(
        gram(&plain, &plain, KernelKind::SignGd),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        gram(&signed, &signed, KernelKind::ASignGd),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        gram(&signed, &plain, KernelKind::Sgd),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        compute_features(&model, &data, &[1], FeatureMode::Plain),
        Err(Error::Input(_))
    ));
}

#[test]
fn gram_files_round_trip_and_detect_damage() {
    let model = net(2, 3);
    let data = dataset(&[
        vec![1.0, -1.0, 0.5],
        vec![0.1, 0.2, 0.3],
        vec![-2.0, 0.0, 1.0],
    ]);
    let k = kernel_between(&model, &data, &data, &[0, 1], KernelKind::ASignGd, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.entkgram");
    k.save(&path).unwrap();
    let back = GramMatrix::load(&path).unwrap();
    assert_eq!(back, k);
    assert!(back
        .values
        .as_slice()
        .iter()
        .zip(k.values.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(GramMatrix::load(&path), Err(Error::Corrupt(_))));

    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(GramMatrix::load(&path), Err(Error::Format(_))));

    std::fs::write(&path, &bytes).unwrap();
    let warnings = GramMatrix::load(&path)
        .unwrap()
        .provenance_warnings(Some("other"), None);
    assert_eq!(warnings.len(), 1);
}

#[test]
fn relative_distance_examples() {
    let a = Dense::from_row_major(1, 2, vec![1.0, 3.0]);
    let b = Dense::from_row_major(1, 2, vec![1.0, 2.0]);
    let d = kernel_relative_distance(&a, &b).unwrap();
    assert!((d.mean_elementwise_relative - 1.0 / 3.0).abs() < 1e-15);
    assert!((d.frobenius_relative - 1.0 / 5f64.sqrt()).abs() < 1e-15);
    assert!((d.per_entry_max - 0.5).abs() < 1e-15);
}
