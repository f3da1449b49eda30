use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Pointwise nonlinearity applied after every hidden matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Tanh,
    /// `½x·erf(x/σ) + σ·exp(−x²/σ²)/(2√π) + x/2`, a smooth ReLU surrogate.
    SigmaGelu {
        sigma: f64,
    },
    Relu,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::SigmaGelu { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                Error::config(format!("sigma-gelu needs sigma > 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::SigmaGelu { sigma } => {
                let u = x / sigma;
                0.5 * x * libm::erf(u) + sigma * (-u * u).exp() * 0.5 * INV_SQRT_PI + 0.5 * x
            }
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            // the two exponential terms cancel exactly
            Activation::SigmaGelu { sigma } => 0.5 * (1.0 + libm::erf(x / sigma)),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `φ(0) = 0`. Holds for every kind except σ-gelu.
    pub fn is_zero_at_origin(&self) -> bool {
        !matches!(self, Activation::SigmaGelu { .. })
    }
}
