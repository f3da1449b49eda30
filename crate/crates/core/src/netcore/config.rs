use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;

/// Multiplier `γ`, init std `σ` and learning-rate scale `η` for one matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixScale {
    pub multiplier: f64,
    pub init_std: f64,
    pub lr_scale: f64,
}

/// Width/depth and per-matrix μP bookkeeping for an L-layer MLP.
///
/// Defaults follow the maximal-update table with unit constants:
///
/// | matrix | init std | SGD lr | SignGD/Adam lr |
/// |--------|----------|--------|----------------|
/// | `U`    | `1`      | `n`    | `1`            |
/// | `W`    | `1/√n`   | `1`    | `1/n`          |
/// | `V`    | `1/n`    | `1/n`  | `1/n`          |
///
/// The input multiplier is `1/√d_in` so that first-layer pre-activations are
/// `Θ(1)` for standard-normal inputs; it does not depend on the width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuPConfig {
    pub width: usize,
    /// Number of hidden layers; the network has `depth − 1` hidden-to-hidden matrices.
    pub depth: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub family: OptimizerKind,
    /// Append a constant 1 to every input so `U` carries a bias column.
    #[serde(default)]
    pub augment_input: bool,
    pub input: MatrixScale,
    pub hidden: MatrixScale,
    pub readout: MatrixScale,
}

impl MuPConfig {
    pub fn new(
        width: usize,
        depth: usize,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        family: OptimizerKind,
    ) -> Result<Self> {
        if width == 0 || depth == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::config(format!(
                "dimensions must be positive (width={width}, depth={depth}, d_in={input_dim}, d_out={output_dim})"
            )));
        }
        let n = width as f64;
        let (lr_u, lr_w, lr_v) = match family {
            OptimizerKind::Sgd => (n, 1.0, 1.0 / n),
            OptimizerKind::SignGd | OptimizerKind::Adam => (1.0, 1.0 / n, 1.0 / n),
        };
        let cfg = Self {
            width,
            depth,
            input_dim,
            output_dim,
            activation,
            family,
            augment_input: false,
            input: MatrixScale {
                multiplier: 1.0 / (input_dim as f64).sqrt(),
                init_std: 1.0,
                lr_scale: lr_u,
            },
            hidden: MatrixScale {
                multiplier: 1.0,
                init_std: 1.0 / n.sqrt(),
                lr_scale: lr_w,
            },
            readout: MatrixScale {
                multiplier: 1.0,
                init_std: 1.0 / n,
                lr_scale: lr_v,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_augmented_input(mut self) -> Self {
        self.augment_input = true;
        self.input.multiplier = 1.0 / ((self.input_dim + 1) as f64).sqrt();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config(
                "width, depth and dimensions must be positive",
            ));
        }
        self.activation.validate()?;
        for (name, s) in [
            ("input", self.input),
            ("hidden", self.hidden),
            ("readout", self.readout),
        ] {
            if !(s.multiplier.is_finite() && s.init_std >= 0.0 && s.lr_scale >= 0.0) {
                return Err(Error::config(format!(
                    "invalid scale for {name} matrix: {s:?}"
                )));
            }
        }
        Ok(())
    }

    /// Column count of `U`, including the bias column when inputs are augmented.
    pub fn effective_input_dim(&self) -> usize {
        self.input_dim + usize::from(self.augment_input)
    }
}
