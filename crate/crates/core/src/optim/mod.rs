//! SGD, SignGD (hard and ε-smoothed) and Adam, plus the fine-tuning loop.

mod loss;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub use loss::{loss_and_derivative, loss_value, output_derivative, LossKind};
pub use train::{read_trace_jsonl, train, write_trace_jsonl, Snapshot, StepRecord, TrainTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "signgd")]
    SignGd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Base learning rate; each parameter block multiplies it by its own scale.
    pub lr: f64,
    /// Smoothing for SignGD; `0` is the hard sign with `sign(0) = 0`.
    #[serde(default)]
    pub eps_sign: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_adam")]
    pub eps_adam: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    /// Record probe outputs every this many steps (0 disables).
    #[serde(default)]
    pub probe_every: usize,
    /// Steps at which to keep a copy of the pre-step parameters.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
    /// Linearly decay the learning rate to zero over `steps`.
    #[serde(default)]
    pub linear_decay: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps_adam() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    1
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64, steps: usize) -> Self {
        Self {
            kind,
            lr,
            eps_sign: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps_adam(),
            batch_size: 1,
            steps,
            loss: LossKind::CrossEntropy,
            seed: 0,
            probe_every: 0,
            snapshot_steps: Vec::new(),
            linear_decay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::config("eps_adam must be positive"));
        }
        if !(self.eps_sign >= 0.0) {
            return Err(Error::config("eps_sign must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate used at step `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.linear_decay && self.steps > 0 {
            self.lr * (1.0 - t as f64 / self.steps as f64)
        } else {
            self.lr
        }
    }
}

/// Coordinate-wise `x / (|x| + ε)`; `ε = 0` gives the hard sign with `sign(0) = 0`.
pub fn epsilon_sign(v: &[f64], eps: f64) -> Vec<f64> {
    v.iter().map(|&x| epsilon_sign_scalar(x, eps)).collect()
}

#[inline]
pub fn epsilon_sign_scalar(x: f64, eps: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if eps == 0.0 {
        x.signum()
    } else {
        x / (x.abs() + eps)
    }
}

/// Adam moments; unused by SGD and SignGD.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// Per-coordinate update direction before the learning rate is applied.
pub fn update_direction(
    grads: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Vec<f64> {
    match config.kind {
        OptimizerKind::Sgd => grads.to_vec(),
        OptimizerKind::SignGd => epsilon_sign(grads, config.eps_sign),
        OptimizerKind::Adam => {
            if state.m.len() != grads.len() {
                *state = OptimizerState::new(grads.len());
            }
            state.t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(state.t as i32);
            let c2 = 1.0 - b2.powi(state.t as i32);
            grads
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                    let m_hat = state.m[i] / c1;
                    let v_hat = state.v[i] / c2;
                    m_hat / (v_hat.sqrt() + config.eps_adam)
                })
                .collect()
        }
    }
}

/// One optimizer step on the loss gradient `grads`. A non-finite gradient is
/// refused and leaves both `model` and `state` untouched.
pub fn step(
    model: &mut dyn Model,
    grads: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    let layout = model.layout();
    if grads.len() != layout.len() {
        return Err(Error::shape(format!(
            "gradient has {} coordinates, model has {}",
            grads.len(),
            layout.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at coordinate {i}; step refused"
        )));
    }
    let lr = config.lr_at(state.t);
    let dir = update_direction(grads, state, config);
    // x + (−0.0) == x bit for bit, including x = −0.0, so frozen blocks stay untouched
    let mut delta = vec![-0.0; dir.len()];
    for b in &layout.blocks {
        if b.lr_scale == 0.0 || lr == 0.0 {
            continue;
        }
        let rate = lr * b.lr_scale;
        for i in b.range() {
            delta[i] = -rate * dir[i];
        }
    }
    if config.kind != OptimizerKind::Adam {
        state.t += 1;
    }
    model.add_to_parameters(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Dense;
    use crate::netcore::{Activation, MatrixRole, NetworkParams, WeightMatrix};

    fn two_param_model(a: f64, b: f64) -> NetworkParams {
        let mk = |role, v: Vec<f64>, rows, cols| WeightMatrix {
            role,
            values: Dense::from_row_major(rows, cols, v),
            multiplier: 1.0,
            init_std: 1.0,
            lr_scale: 1.0,
        };
        NetworkParams {
            activation: Activation::Linear,
            augment_input: false,
            matrices: vec![
                mk(MatrixRole::Input, vec![a], 1, 1),
                mk(MatrixRole::Readout, vec![b], 1, 1),
            ],
        }
    }

    #[test]
    fn epsilon_sign_examples() {
        assert_eq!(epsilon_sign(&[3.0], 1.0), vec![0.75]);
        assert_eq!(epsilon_sign(&[0.0, 0.0], 0.5), vec![0.0, 0.0]);
        assert_eq!(epsilon_sign(&[0.0], 0.0), vec![0.0]);
        assert_eq!(epsilon_sign(&[-0.5], 0.5), vec![-0.5]);
        assert_eq!(epsilon_sign(&[-2.0, 7.0], 0.0), vec![-1.0, 1.0]);
    }

    #[test]
    fn signgd_step_example() {
        let mut m = two_param_model(1.0, 2.0);
        let cfg = OptimizerConfig::new(OptimizerKind::SignGd, 0.1, 1);
        let mut st = OptimizerState::default();
        step(&mut m, &[0.5, -3.0], &mut st, &cfg).unwrap();
        assert_eq!(m.parameters(), vec![0.9, 2.1]);
    }

    #[test]
    fn adam_first_step_is_epsilon_sign() {
        let mut m = two_param_model(0.0, 0.0);
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.1, 1);
        let mut st = OptimizerState::default();
        step(&mut m, &[2.0, -2.0], &mut st, &cfg).unwrap();
        let p = m.parameters();
        assert!((p[0] + 0.0999999995).abs() < 1e-15, "{}", p[0]);
        assert!((p[1] - 0.0999999995).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_sgd_leaves_params_unchanged() {
        let mut m = two_param_model(-0.0, 3.0);
        let before = m.clone();
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.0, 1);
        step(&mut m, &[1.0, -0.0], &mut OptimizerState::default(), &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut m = two_param_model(1.0, 1.0);
        let before = m.clone();
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.1, 1);
        let mut st = OptimizerState::default();
        assert!(matches!(
            step(&mut m, &[f64::NAN, 1.0], &mut st, &cfg),
            Err(Error::Numeric(_))
        ));
        assert_eq!(m, before);
        assert_eq!(st, OptimizerState::default());
    }

    #[test]
    fn frozen_blocks_are_bit_unchanged() {
        let mut m = two_param_model(-0.0, 1.0);
        m.matrices[0].lr_scale = 0.0;
        let cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.3, 1);
        let mut st = OptimizerState::default();
        for _ in 0..10 {
            step(&mut m, &[-0.0, 0.5], &mut st, &cfg).unwrap();
        }
        assert_eq!(
            m.matrices[0].values.as_slice()[0].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::new(OptimizerKind::Adam, 0.1, 1);
        assert!(c.validate().is_ok());
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        c.beta1 = 0.9;
        c.eps_adam = 0.0;
        assert!(c.validate().is_err());
    }
}
