use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::model::Model;
use crate::optim::{
    epsilon_sign_scalar, output_derivative, step, OptimizerConfig, OptimizerKind, OptimizerState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub eta: f64,
    pub chi: Vec<f64>,
    /// `‖Δf(ξ) + ν K(ξ, ξ_t)‖` after one step at `η`.
    pub r_eta: f64,
    /// Same at `η/2`.
    pub r_half: f64,
    /// `r(η) / r(η/2)`; about 4 when the remainder is second order.
    pub ratio: f64,
    /// `χ_t = 0`: the step does not move the parameters.
    pub degenerate: bool,
}

/// Residual of the one-step kernel law at learning rate `eta`.
///
/// SGD: `Δf_a(ξ) ≈ −η Σ_b K_ab(ξ, ξ_t) χ_b` with the learning-rate weighted
/// `K_ab = Σ_M η_M ⟨∇_M f_a(ξ), ∇_M f_b(ξ_t)⟩`.
/// SignGD and Adam's first step (single output only): `Δf(ξ) ≈ −η sign(χ)
/// Σ_M η_M ⟨∇_M f(ξ), sign_{ε/|χ|}(∇_M f(ξ_t))⟩`, using
/// `sign_ε(χ g) = sign(χ) sign_{ε/|χ|}(g)`.
fn residual<M: Model + Clone>(
    model: &M,
    train: &Example,
    probe: &[f64],
    config: &OptimizerConfig,
    eta: f64,
) -> Result<(f64, Vec<f64>)> {
    let chi = output_derivative(&model.forward(&train.input)?, train.label, config.loss)?;
    if chi.iter().all(|&c| c == 0.0) {
        return Ok((0.0, chi));
    }
    let grad = model.vjp(&train.input, &chi)?;
    let mut cfg = config.clone();
    cfg.lr = eta;
    cfg.linear_decay = false;
    let mut moved = model.clone();
    step(
        &mut moved,
        &grad,
        &mut OptimizerState::new(model.num_parameters()),
        &cfg,
    )?;
    let f0 = model.forward(probe)?;
    let f1 = moved.forward(probe)?;

    let c = model.output_dim();
    let logits: Vec<usize> = (0..c).collect();
    let jp = model.jacobian_rows(probe, &logits)?;
    let jt = model.jacobian_rows(&train.input, &logits)?;
    let scales = model.layout().lr_scales();
    let predicted: Vec<f64> = match config.kind {
        OptimizerKind::Sgd => (0..c)
            .map(|a| {
                let k_row: Vec<f64> = (0..c)
                    .map(|b| {
                        jp[a]
                            .iter()
                            .zip(&jt[b])
                            .zip(&scales)
                            .map(|((x, y), s)| s * x * y)
                            .sum()
                    })
                    .collect();
                -eta * k_row.iter().zip(&chi).map(|(k, x)| k * x).sum::<f64>()
            })
            .collect(),
        OptimizerKind::SignGd | OptimizerKind::Adam => {
            if c != 1 {
                return Err(Error::config(
                    "sign-based kernel step check needs a single-output model",
                ));
            }
            let eps = if config.kind == OptimizerKind::Adam {
                config.eps_adam
            } else {
                config.eps_sign
            };
            let x = chi[0];
            let eps_eff = eps / x.abs();
            let k: f64 = jp[0]
                .iter()
                .zip(&jt[0])
                .zip(&scales)
                .map(|((p, t), s)| s * p * epsilon_sign_scalar(*t, eps_eff))
                .sum();
            vec![-eta * x.signum() * k]
        }
    };
    let r: Vec<f64> = f1
        .iter()
        .zip(&f0)
        .zip(&predicted)
        .map(|((a, b), p)| (a - b) - p)
        .collect();
    Ok((norm2(&r), chi))
}

/// One step of batch size 1 on `train` at `η` and at `η/2`, comparing the
/// change of `f(probe)` with its kernel prediction.
pub fn kernel_step_check<M: Model + Clone>(
    model: &M,
    train: &Example,
    probe: &[f64],
    config: &OptimizerConfig,
    eta: f64,
) -> Result<StepCheck> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::config(format!(
            "step size must be positive, got {eta}"
        )));
    }
    config.validate()?;
    let (r_eta, chi) = residual(model, train, probe, config, eta)?;
    let degenerate = chi.iter().all(|&c| c == 0.0);
    let (r_half, _) = residual(model, train, probe, config, eta / 2.0)?;
    let ratio = if r_half > 0.0 {
        r_eta / r_half
    } else {
        f64::NAN
    };
    Ok(StepCheck {
        eta,
        chi,
        r_eta,
        r_half,
        ratio,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{init_network, Activation, MuPConfig, NetworkParams};
    use crate::optim::LossKind;

    fn net(act: Activation, out: usize, family: OptimizerKind) -> NetworkParams {
        let cfg = MuPConfig::new(32, 2, 3, out, act, family).unwrap();
        init_network(&cfg, 4).unwrap()
    }

    fn example() -> Example {
        Example {
            id: 0,
            label: 0,
            input: vec![0.7, -1.1, 0.4],
        }
    }

    #[test]
    fn linear_single_matrix_sgd_is_exact() {
        let mut n = net(Activation::Linear, 2, OptimizerKind::Sgd);
        n.freeze_except(&["W1"]);
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 1);
        let c = kernel_step_check(&n, &example(), &[0.2, 0.3, -0.9], &cfg, 0.5).unwrap();
        assert!(c.r_eta <= 1e-12 && c.r_half <= 1e-12, "{c:?}");
    }

    #[test]
    fn tanh_residual_is_second_order() {
        let n = net(Activation::Tanh, 2, OptimizerKind::Sgd);
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 1);
        let c = kernel_step_check(&n, &example(), &[0.2, 0.3, -0.9], &cfg, 1e-3).unwrap();
        assert!((3.5..=4.5).contains(&c.ratio), "{c:?}");
    }

    #[test]
    fn adam_first_step_matches_epsilon_signgd() {
        let n = net(Activation::Tanh, 1, OptimizerKind::Adam);
        let mut adam = OptimizerConfig::new(OptimizerKind::Adam, 0.1, 1);
        adam.eps_adam = 1e-6;
        adam.loss = LossKind::Mse;
        let mut sign = adam.clone();
        sign.kind = OptimizerKind::SignGd;
        sign.eps_sign = 1e-6;
        let probe = [0.2, 0.3, -0.9];
        let a = kernel_step_check(&n, &example(), &probe, &adam, 1e-3).unwrap();
        let s = kernel_step_check(&n, &example(), &probe, &sign, 1e-3).unwrap();
        assert!(
            (a.r_eta - s.r_eta).abs() <= 1e-12 * s.r_eta.max(1e-300) + 1e-18,
            "{a:?} {s:?}"
        );
        assert!((a.r_half - s.r_half).abs() <= 1e-12 * s.r_half.max(1e-300) + 1e-18);
    }

    #[test]
    fn zero_chi_is_degenerate() {
        let n = net(Activation::Tanh, 1, OptimizerKind::Sgd);
        // single output with cross-entropy always has χ = 0
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 1);
        let c = kernel_step_check(&n, &example(), &[0.0, 0.0, 1.0], &cfg, 1e-3).unwrap();
        assert!(c.degenerate);
    }

    #[test]
    fn multi_output_sign_check_is_rejected() {
        let n = net(Activation::Tanh, 2, OptimizerKind::SignGd);
        let cfg = OptimizerConfig::new(OptimizerKind::SignGd, 0.1, 1);
        assert!(matches!(
            kernel_step_check(&n, &example(), &[0.0, 0.0, 1.0], &cfg, 1e-3),
            Err(Error::Config(_))
        ));
    }
}
