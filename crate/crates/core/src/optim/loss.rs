use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::softmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy against the class index.
    #[default]
    CrossEntropy,
    /// `½‖f − onehot(y)‖²`.
    Mse,
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// `χ = ∂ℓ(f, y)/∂f`.
pub fn output_derivative(logits: &[f64], label: usize, loss: LossKind) -> Result<Vec<f64>> {
    Ok(loss_and_derivative(logits, label, loss)?.1)
}

pub fn loss_value(logits: &[f64], label: usize, loss: LossKind) -> Result<f64> {
    Ok(loss_and_derivative(logits, label, loss)?.0)
}

pub fn loss_and_derivative(
    logits: &[f64],
    label: usize,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    check_label(logits, label)?;
    match loss {
        LossKind::CrossEntropy => {
            let p = softmax(logits);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            let chi = p
                .iter()
                .enumerate()
                .map(|(c, &pc)| if c == label { pc - 1.0 } else { pc })
                .collect();
            Ok((lse - logits[label], chi))
        }
        LossKind::Mse => {
            let chi: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(c, &z)| if c == label { z - 1.0 } else { z })
                .collect();
            let l = 0.5 * chi.iter().map(|r| r * r).sum::<f64>();
            Ok((l, chi))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax_derivative() {
        assert_eq!(
            output_derivative(&[0.0, 0.0], 0, LossKind::CrossEntropy).unwrap(),
            vec![-0.5, 0.5]
        );
    }

    #[test]
    fn mse_at_target_is_zero() {
        assert_eq!(
            output_derivative(&[0.0, 1.0, 0.0], 1, LossKind::Mse).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn confident_correct_model_has_vanishing_chi() {
        let chi = output_derivative(&[40.0, -40.0], 0, LossKind::CrossEntropy).unwrap();
        assert!(chi.iter().all(|c| c.abs() < 1e-30));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            output_derivative(&[0.0, 0.0], 2, LossKind::Mse),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cross_entropy_derivative_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0];
        let chi = output_derivative(&z, 2, LossKind::CrossEntropy).unwrap();
        for c in 0..3 {
            let mut p = z;
            let mut m = z;
            p[c] += 1e-6;
            m[c] -= 1e-6;
            let fd = (loss_value(&p, 2, LossKind::CrossEntropy).unwrap()
                - loss_value(&m, 2, LossKind::CrossEntropy).unwrap())
                / 2e-6;
            assert!((fd - chi[c]).abs() < 1e-8);
        }
    }
}
