//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use entk::data::{Dataset, Example};
use entk::dynamics::{kernel_step_check, width_sweep, Linear3Instance, SweepProtocol, Thresholds};
use entk::kernels::{compute_features, cross_gram, gram, FeatureMode, KernelKind};
use entk::linalg::{dot, Dense};
use entk::lowrank::{
    block_gram, jl_preservation_stats, jl_rank, lora_attach, lora_gram, lora_kernel_comparison,
    measure_c, orthonormal_columns, random_unit_pairs, LoraConfig,
};
use entk::netcore::task::gen_kshot;
use entk::netcore::{
    finite_diff_gradient, init_network, per_example_gradient, relative_l2_error, Activation,
    FtMode, MuPConfig, NetworkParams, TaskSpec,
};
use entk::optim::{
    epsilon_sign, step, train, update_direction, LossKind, OptimizerConfig, OptimizerKind,
    OptimizerState,
};
use entk::solvers::{
    asymmetric_solve, fit_asymmetric, fit_symmetric, operator_norm, predict, SolveConfig, Split,
    TargetEncoding,
};
use entk::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn net(
    width: usize,
    depth: usize,
    d_in: usize,
    d_out: usize,
    act: Activation,
    family: OptimizerKind,
    seed: u64,
) -> NetworkParams {
    let cfg = MuPConfig::new(width, depth, d_in, d_out, act, family).expect("valid config");
    init_network(&cfg, seed).expect("init")
}

fn gaussian_data(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Dense::gaussian(n, d, 1.0, &mut rng);
    Dataset::new(
        (0..n)
            .map(|i| Example {
                id: i as u64,
                label: rng.random_range(0..classes),
                input: m.row(i).to_vec(),
            })
            .collect(),
    )
}

fn c1_linear3() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let t = Linear3Instance::random(64, 16, seed)
            .decompose()
            .expect("decompose");
        worst.0 = worst.0.max(t.residual);
        worst.1 = worst.1.max(t.kernel_residual);
        worst.2 = worst.2.max((t.t3 - t.t3_closed_form).abs());
    }
    Outcome {
        pass: worst.0 <= 1e-12 && worst.1 <= 1e-10,
        detail: format!(
            "max |Δf−ΣT| = {:.2e} (≤1e-12), max |T1+T2+χK| = {:.2e} (≤1e-10), max |T3−closed form| = {:.2e}",
            worst.0, worst.1, worst.2
        ),
    }
}

fn c2_adam_first_step() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let eps = 1e-8;
    for _ in 0..1000 {
        let len = rng.random_range(1..64);
        let scale = 10f64.powf(rng.random_range(-6.0..2.0));
        let g: Vec<f64> = (0..len)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let mut adam = OptimizerConfig::new(OptimizerKind::Adam, 1.0, 1);
        adam.eps_adam = eps;
        let dir = update_direction(&g, &mut OptimizerState::new(len), &adam);
        let want = epsilon_sign(&g, eps);
        for (a, b) in dir.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    // the same through a full parameter step
    let base = net(16, 2, 4, 3, Activation::Tanh, OptimizerKind::Adam, 1);
    let g: Vec<f64> = (0..base.num_parameters())
        .map(|_| rng.random_range(-1e-3..1e-3))
        .collect();
    let mut adam = OptimizerConfig::new(OptimizerKind::Adam, 0.1, 1);
    adam.eps_adam = eps;
    let mut sign = adam.clone();
    sign.kind = OptimizerKind::SignGd;
    sign.eps_sign = eps;
    let (mut a, mut s) = (base.clone(), base.clone());
    step(&mut a, &g, &mut OptimizerState::new(g.len()), &adam).expect("step");
    step(&mut s, &g, &mut OptimizerState::new(g.len()), &sign).expect("step");
    let step_dev = a
        .parameters()
        .iter()
        .zip(s.parameters())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: worst <= 1e-12 && step_dev <= 1e-12,
        detail: format!("max coordinate gap {worst:.2e} over 1000 gradients, full-step gap {step_dev:.2e} (≤1e-12)"),
    }
}

fn c3_kernel_step() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let train_ex = Example {
        id: 0,
        label: 0,
        input: vec![0.6, -1.1, 0.4, 0.9, -0.2, 1.3, 0.05, -0.7],
    };
    let probe = [0.3, 0.8, -0.5, -1.0, 0.2, 0.1, 1.4, -0.3];
    for family in [OptimizerKind::Sgd, OptimizerKind::SignGd] {
        let n = net(256, 2, 8, 1, Activation::Tanh, family, 3);
        let mut cfg = OptimizerConfig::new(family, 1.0, 1);
        cfg.loss = LossKind::Mse;
        for eta in [1e-3, 1e-4] {
            let c = kernel_step_check(&n, &train_ex, &probe, &cfg, eta).expect("step check");
            let ok = !c.degenerate && (3.5..=4.5).contains(&c.ratio);
            pass &= ok;
            lines.push(format!(
                "{family:?} η={eta:.0e}: r(η)/r(η/2)={:.3}",
                c.ratio
            ));
        }
    }
    Outcome {
        pass,
        detail: format!("{} (each in [3.5, 4.5])", lines.join(", ")),
    }
}

fn c4_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for act in [
        Activation::Linear,
        Activation::Tanh,
        Activation::SigmaGelu { sigma: 0.1 },
    ] {
        for depth in [1, 2, 3] {
            let n = net(12, depth, 5, 3, act, OptimizerKind::Sgd, depth as u64);
            for trial in 0..3 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
                for logit in 0..3 {
                    let exact = per_example_gradient(&n, trial, &x, logit).expect("gradient");
                    let fd = finite_diff_gradient(&n, trial, &x, logit, 1e-5).expect("fd");
                    worst = worst.max(relative_l2_error(&exact.values, &fd.values));
                }
            }
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max relative L2 error {worst:.2e} (≤1e-6) over linear, tanh, σ-gelu(0.1)"),
    }
}

fn c5_reparam() -> Outcome {
    let data = gaussian_data(16, 6, 3, 5);
    let probes: Vec<Vec<f64>> = gaussian_data(4, 6, 3, 6)
        .examples
        .into_iter()
        .map(|e| e.input)
        .collect();
    let mut lines = Vec::new();
    let mut pass = true;
    for family in [
        OptimizerKind::Sgd,
        OptimizerKind::SignGd,
        OptimizerKind::Adam,
    ] {
        let base = net(48, 2, 6, 3, Activation::Tanh, family, 7);
        let re = base
            .reparametrize(family, 2.0, None)
            .expect("reparametrize");
        let lr = match family {
            OptimizerKind::Sgd => 0.5,
            _ => 0.02,
        };
        let mut cfg = OptimizerConfig::new(family, lr, 50);
        cfg.batch_size = 4;
        cfg.probe_every = 1;
        cfg.eps_adam = 1e-16;
        let a = train(&base, &data, &cfg, &probes).expect("train");
        let b = train(&re, &data, &cfg, &probes).expect("train");
        let mut dev = 0.0f64;
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let (pa, pb) = (
                ra.probe_values.as_ref().expect("probes"),
                rb.probe_values.as_ref().expect("probes"),
            );
            for (va, vb) in pa.iter().flatten().zip(pb.iter().flatten()) {
                dev = dev.max((va - vb).abs());
            }
        }
        for p in &probes {
            let (fa, fb) = (
                a.final_params.forward(p).expect("fwd"),
                b.final_params.forward(p).expect("fwd"),
            );
            for (va, vb) in fa.iter().zip(&fb) {
                dev = dev.max((va - vb).abs());
            }
        }
        let t0 = probes
            .iter()
            .flat_map(|p| {
                let (x, y) = (base.forward(p).expect("fwd"), re.forward(p).expect("fwd"));
                x.into_iter()
                    .zip(y)
                    .map(|(u, v)| (u - v).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        let ok = a.records.len() == 50 && dev <= 1e-8 && t0 <= 1e-12;
        pass &= ok;
        lines.push(format!(
            "{family:?}: t=0 gap {t0:.1e}, 50-step gap {dev:.2e}"
        ));
    }
    Outcome {
        pass,
        detail: format!("{} (≤1e-8)", lines.join(", ")),
    }
}

fn c6_asymmetric() -> Outcome {
    let spec = TaskSpec::binary(8, 4, 6);
    let split = gen_kshot(&spec, 6, 16, 64).expect("split");
    let model = net(32, 2, 8, 2, Activation::Tanh, OptimizerKind::Sgd, 6);
    let feats =
        compute_features(&model, &split.train, &[0, 1], FeatureMode::Plain).expect("features");
    let k = gram(&feats, &feats, KernelKind::Sgd).expect("gram");
    let k_test = cross_gram(&model, &split.test, &feats, KernelKind::Sgd).expect("cross gram");
    let test_feats =
        compute_features(&model, &split.test, &[0, 1], FeatureMode::Plain).expect("features");
    let k_train_test = gram(&feats, &test_feats, KernelKind::Sgd).expect("gram");
    let labels = split.train.labels();
    let op = operator_norm(&k.values);
    let tr = Split {
        gram: &k,
        labels: &labels,
        f0: None,
    };
    let mut mismatches = 0;
    let mut compared = 0;
    for combine_weight in [1.0, 0.5, 0.0] {
        let config = SolveConfig {
            encoding: TargetEncoding::PlusMinus,
            combine_weight,
            ..SolveConfig::default()
        };
        for gamma in [0.01, 0.1, 1.0, 10.0] {
            let asym = fit_asymmetric(tr, gamma, None, &config).expect("asymmetric fit");
            let sym = fit_symmetric(tr, 1.0 / (gamma * op), None, &config).expect("symmetric fit");
            let pa = predict(&k_test, &asym, None, Some(&k_train_test)).expect("predict");
            let ps = predict(&k_test, &sym, None, None).expect("predict");
            mismatches += pa
                .decisions
                .iter()
                .zip(&ps.decisions)
                .filter(|(a, b)| a != b)
                .count();
            compared += pa.decisions.len();
        }
    }
    let one = Dense::from_row_major(1, 1, vec![1.0]);
    let (alpha, beta) = asymmetric_solve(&one, &[1.0], 0.5).expect("solve");
    let third_gap = (alpha[0] - 1.0 / 3.0)
        .abs()
        .max((beta[0] - 1.0 / 3.0).abs());
    Outcome {
        pass: labels.len() == 32 && mismatches == 0 && third_gap <= 1e-15,
        detail: format!(
            "N={} task: {mismatches}/{compared} test decisions differ across γ grid; H=[1], γ=0.5 → α={alpha:?}, β={beta:?}",
            labels.len(),
            alpha = alpha[0],
            beta = beta[0]
        ),
    }
}

fn unit_data(n: usize, d: usize, seed: u64) -> Dataset {
    let mut ds = gaussian_data(n, d, 2, seed);
    for e in &mut ds.examples {
        let norm = dot(&e.input, &e.input).sqrt();
        e.input.iter_mut().for_each(|x| *x /= norm);
    }
    ds
}

fn c7_low_rank() -> Outcome {
    let pairs = random_unit_pairs(64, 64, 70);
    let jl = jl_preservation_stats(&pairs, 1.0, 200, 0.3, 10_000, 71).expect("jl");

    let (n, eps) = (16, 0.5);
    let base = net(256, 1, 256, 2, Activation::Tanh, OptimizerKind::Sgd, 72);
    let ds = unit_data(n, 256, 73);
    let c = measure_c(&base, 0, &ds, &[0, 1]).expect("c");
    let k = jl_rank(c, n, eps);
    let mut passes = 0;
    let mut worst_ratio = 0.0f64;
    let seeds = 50;
    let mut rank_ok = k <= 256;
    if rank_ok {
        for seed in 0..seeds {
            let row =
                lora_kernel_comparison(&base, &LoraConfig::new(k, &["U"], seed), &ds, &[0, 1], eps)
                    .expect("compare");
            passes += usize::from(row.pass);
            worst_ratio = worst_ratio.max(row.max_dev / row.bound);
        }
    } else {
        rank_ok = false;
    }
    let a = orthonormal_columns(256, 256, 74).expect("orthonormal");
    let lora = lora_attach(&base, &LoraConfig::new(256, &["U"], 0))
        .expect("attach")
        .with_a("U", a)
        .expect("A");
    let k_lora = lora_gram(&lora, &ds, &[0, 1]).expect("gram");
    let k_full = block_gram(&base, &ds, &[0, 1], "U").expect("gram");
    let scale = k_full
        .values
        .as_slice()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let exact_gap = k_lora
        .values
        .as_slice()
        .iter()
        .zip(k_full.values.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale;
    Outcome {
        pass: jl.failure_rate <= jl.bound && rank_ok && passes * 10 >= seeds as usize * 9 && exact_gap <= 1e-12,
        detail: format!(
            "JL failure rate {:.4} ≤ bound {:.4}; c={c:.4}, k={k}: {passes}/{seeds} seeds within c²ε (worst dev/bound {worst_ratio:.2e}); AᵀA=I relative gap {exact_gap:.1e}",
            jl.failure_rate, jl.bound
        ),
    }
}

fn c8_width_sweep() -> Outcome {
    let protocol = SweepProtocol::default();
    let widths = [64, 128, 256, 512];
    let seeds: Vec<u64> = (0..5).collect();
    let r = width_sweep(
        &protocol,
        &widths,
        &seeds,
        &[FtMode::Prompted, FtMode::Standard],
    )
    .expect("sweep");
    let failed = r.cells.iter().filter(|c| c.error.is_some()).count();
    let v = r.verdict(&Thresholds::default()).expect("verdict");
    let col = |mode: FtMode, f: fn(&entk::dynamics::WidthSummary) -> f64| {
        r.summaries_for(mode)
            .iter()
            .map(|s| format!("{:.4}", f(s)))
            .collect::<Vec<_>>()
            .join("/")
    };
    Outcome {
        pass: v.pass && failed == 0,
        detail: format!(
            "prompted χ_max {} (strict↓ {}), drift {} (↓ {}), lin ratio {} (non-↓ {}, {:.2} at 512), eNTK/FT at 512 {:.3}; standard χ_max {} (flat {}); failed cells {failed}",
            col(FtMode::Prompted, |s| s.chi_max),
            v.chi_max_strictly_decreasing,
            col(FtMode::Prompted, |s| s.drift_feat),
            v.drift_decreasing,
            col(FtMode::Prompted, |s| s.lin_ratio),
            v.lin_ratio_non_decreasing,
            v.lin_ratio_at_largest,
            v.entk_fraction_at_largest,
            col(FtMode::Standard, |s| s.chi_max),
            v.standard_chi_flat,
        ),
    }
}

fn naive_entry(gi: &[f64], gj: &[f64], kind: KernelKind, eps: f64) -> f64 {
    let sg = |x: f64| if x == 0.0 { 0.0 } else { x / (x.abs() + eps) };
    gi.iter()
        .zip(gj)
        .map(|(&a, &b)| match kind {
            KernelKind::Sgd => a * b,
            KernelKind::SignGd => sg(a) * sg(b),
            KernelKind::ASignGd => a * sg(b),
        })
        .sum()
}

fn c9_brute_force_gram() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (n, classes, seed) in [
        (1, 1, 0),
        (3, 2, 1),
        (5, 3, 2),
        (8, 3, 3),
        (8, 1, 4),
        (6, 2, 5),
    ] {
        let model = net(6, 2, 4, classes, Activation::Tanh, OptimizerKind::Sgd, seed);
        let ds = gaussian_data(n, 4, classes, 100 + seed);
        let logits: Vec<usize> = (0..classes).collect();
        let plain = compute_features(&model, &ds, &logits, FeatureMode::Plain).expect("features");
        for (kind, eps) in [
            (KernelKind::Sgd, 0.0),
            (KernelKind::SignGd, 1e-3),
            (KernelKind::SignGd, 0.0),
            (KernelKind::ASignGd, 1e-2),
        ] {
            let sign = compute_features(&model, &ds, &logits, FeatureMode::Sign { eps: Some(eps) })
                .expect("features");
            let (rows, cols) = match kind {
                KernelKind::Sgd => (&plain, &plain),
                KernelKind::SignGd => (&sign, &sign),
                KernelKind::ASignGd => (&plain, &sign),
            };
            let k = gram(rows, cols, kind).expect("gram");
            // naive double loop in class-major order: row c·N + i
            for c in 0..classes {
                for i in 0..n {
                    let gi =
                        per_example_gradient(&model, ds.examples[i].id, &ds.examples[i].input, c)
                            .expect("grad");
                    for c2 in 0..classes {
                        for j in 0..n {
                            let gj = per_example_gradient(
                                &model,
                                ds.examples[j].id,
                                &ds.examples[j].input,
                                c2,
                            )
                            .expect("grad");
                            let want = naive_entry(&gi.values, &gj.values, kind, eps);
                            let got = k.get(c * n + i, c2 * n + j);
                            worst = worst.max((got - want).abs() / want.abs().max(1.0));
                        }
                    }
                }
            }
            cases += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("{cases} (N, C, kind) cases, max deviation {worst:.2e} (≤1e-10)"),
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 9] = [
        (
            1,
            "three-layer linear decomposition",
            Duration::from_secs(5),
            c1_linear3,
        ),
        (
            2,
            "Adam first step equals ε-sign",
            Duration::from_secs(1),
            c2_adam_first_step,
        ),
        (
            3,
            "one-step kernel law",
            Duration::from_secs(60),
            c3_kernel_step,
        ),
        (4, "gradient oracle", Duration::from_secs(120), c4_gradients),
        (
            5,
            "reparametrization invariance",
            Duration::from_secs(60),
            c5_reparam,
        ),
        (
            6,
            "asymmetric solver reduction",
            Duration::from_secs(10),
            c6_asymmetric,
        ),
        (
            7,
            "JL / LoRA kernel preservation",
            Duration::from_secs(300),
            c7_low_rank,
        ),
        (
            8,
            "width-scaling sweep",
            Duration::from_secs(1800),
            c8_width_sweep,
        ),
        (
            9,
            "brute-force Gram equivalence",
            Duration::from_secs(10),
            c9_brute_force_gram,
        ),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut all = true;
    for (id, name, budget, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= budget;
        all &= pass;
        println!(
            "criterion {id} [{}] {name}: {} [{:.1}s / {}s budget]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
