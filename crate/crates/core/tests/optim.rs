use entk::data::{Dataset, Example};
use entk::netcore::{init_network, Activation, MuPConfig, NetworkParams};
use entk::optim::{
    epsilon_sign, read_trace_jsonl, step, train, update_direction, write_trace_jsonl, LossKind,
    OptimizerConfig, OptimizerKind, OptimizerState,
};
use entk::Model;
use proptest::prelude::*;

fn data() -> Dataset {
    let pts = [
        [1.0, 0.2],
        [-0.4, 0.9],
        [0.3, -1.2],
        [-1.0, -0.5],
        [0.7, 0.7],
        [0.0, 1.5],
    ];
    Dataset::new(
        pts.iter()
            .enumerate()
            .map(|(i, p)| Example {
                id: i as u64,
                label: i % 3,
                input: p.to_vec(),
            })
            .collect(),
    )
}

fn net(family: OptimizerKind, seed: u64) -> NetworkParams {
    init_network(
        &MuPConfig::new(24, 2, 2, 3, Activation::Tanh, family).unwrap(),
        seed,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn adam_first_step_is_epsilon_sign(
        g in proptest::collection::vec(-1e3f64..1e3, 1..40),
        eps in prop_oneof![Just(0.0), 1e-12f64..1e-3],
        b1 in 0.0f64..0.99,
        b2 in 0.0f64..0.9999,
    ) {
        let mut cfg = OptimizerConfig::new(OptimizerKind::Adam, 1.0, 1);
        cfg.eps_adam = eps;
        cfg.beta1 = b1;
        cfg.beta2 = b2;
        let d = update_direction(&g, &mut OptimizerState::new(g.len()), &cfg);
        for (a, b) in d.iter().zip(epsilon_sign(&g, eps)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn epsilon_sign_is_odd_and_bounded(x in -1e6f64..1e6, eps in 0.0f64..1.0) {
        let s = epsilon_sign(&[x, -x], eps);
        prop_assert!(s[0].abs() <= 1.0);
        prop_assert_eq!(s[0], -s[1]);
    }
}

#[test]
fn sgd_step_applies_per_matrix_scales() {
    let mut model = net(OptimizerKind::Sgd, 0);
    let theta = model.parameters();
    let grads: Vec<f64> = (0..theta.len())
        .map(|i| ((i % 7) as f64 - 3.0) * 1e-3)
        .collect();
    let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 1);
    step(
        &mut model,
        &grads,
        &mut OptimizerState::new(theta.len()),
        &cfg,
    )
    .unwrap();
    let after = model.parameters();
    let layout = model.layout();
    for block in &layout.blocks {
        for i in block.range() {
            let want = theta[i] - 0.1 * block.lr_scale * grads[i];
            assert!((after[i] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn training_is_deterministic_and_traces_round_trip() {
    let model = net(OptimizerKind::Adam, 1);
    let mut cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.01, 12);
    cfg.batch_size = 2;
    cfg.seed = 5;
    let a = train(&model, &data(), &cfg, &[]).unwrap();
    let b = train(&model, &data(), &cfg, &[]).unwrap();
    assert_eq!(a.final_params.parameters(), b.final_params.parameters());
    assert_eq!(a.records.len(), 12);

    let mut buf = Vec::new();
    write_trace_jsonl(&a.records, &mut buf).unwrap();
    assert_eq!(read_trace_jsonl(&buf[..]).unwrap(), a.records);
}

#[test]
fn every_example_is_seen_once_per_epoch() {
    let model = net(OptimizerKind::Sgd, 2);
    let mut cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.01, 3);
    cfg.batch_size = 2;
    let trace = train(&model, &data(), &cfg, &[]).unwrap();
    let mut ids: Vec<u64> = trace
        .records
        .iter()
        .flat_map(|r| r.example_ids.clone())
        .collect();
    ids.sort();
    assert_eq!(ids, (0..6).collect::<Vec<_>>());
}

#[test]
fn reparametrized_trajectories_coincide() {
    let probes = vec![vec![0.5, -0.5], vec![-1.0, 0.3]];
    for (family, lr) in [
        (OptimizerKind::Sgd, 0.3),
        (OptimizerKind::SignGd, 0.01),
        (OptimizerKind::Adam, 0.01),
    ] {
        let base = net(family, 3);
        for gamma in [2.0, 0.5, 3.0] {
            let re = base.reparametrize(family, gamma, None).unwrap();
            let mut cfg = OptimizerConfig::new(family, lr, 20);
            cfg.batch_size = 3;
            cfg.eps_sign = 0.0;
            cfg.eps_adam = 1e-16;
            cfg.probe_every = 1;
            let a = train(&base, &data(), &cfg, &probes).unwrap();
            let b = train(&re, &data(), &cfg, &probes).unwrap();
            for (ra, rb) in a.records.iter().zip(&b.records) {
                let (pa, pb) = (
                    ra.probe_values.as_ref().unwrap(),
                    rb.probe_values.as_ref().unwrap(),
                );
                for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
                    assert!((x - y).abs() <= 1e-8, "{family:?} γ={gamma}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let model = net(OptimizerKind::Sgd, 4);
    let mut cfg = OptimizerConfig::new(OptimizerKind::Sgd, 1e200, 50);
    cfg.loss = LossKind::Mse;
    let trace = train(&model, &data(), &cfg, &[]).unwrap();
    assert!(trace.diverged);
    assert!(trace.records.len() < 50);
}
