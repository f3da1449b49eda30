//! Linear probing: fit a readout on frozen final-layer representations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::NetworkParams;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Dense;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeLoss {
    /// Ridge regression onto one-hot targets.
    Ridge,
    /// Multinomial logistic regression, full-batch gradient descent.
    Logistic { iterations: usize },
}

/// Probe head `Γ` (`n × C`) for `params`' representation. The head is
/// expressed in raw readout units: logits are `γ_V·Γᵀh`.
pub fn linear_probe(
    params: &NetworkParams,
    dataset: &Dataset,
    num_classes: usize,
    lambda: f64,
    loss: ProbeLoss,
) -> Result<Dense> {
    dataset.ensure_non_empty()?;
    let feats = dataset
        .examples
        .iter()
        .map(|e| params.representation(&e.input))
        .collect::<Result<Vec<_>>>()?;
    let mut head = probe_features(&feats, &dataset.labels(), num_classes, lambda, loss)?;
    head.scale_in_place(1.0 / params.readout().multiplier);
    Ok(head)
}

/// Fit `G` (`dim × C`) so that `Gᵀh_i` approximates the one-hot label of example `i`.
pub fn probe_features(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
    loss: ProbeLoss,
) -> Result<Dense> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::input(
            "probe needs one label per non-empty feature row",
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("probe regularization must be non-negative"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let n = features.len();
    let d = features[0].len();
    let h = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let y = DMatrix::from_fn(n, num_classes, |i, c| f64::from(u8::from(labels[i] == c)));
    let g = match loss {
        ProbeLoss::Ridge => ridge(&h, &y, lambda)?,
        ProbeLoss::Logistic { iterations } => logistic(&h, labels, num_classes, lambda, iterations),
    };
    Ok(Dense::from_row_major(
        d,
        num_classes,
        g.transpose().as_slice().to_vec(),
    ))
}

fn ridge(h: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let (n, d) = h.shape();
    let singular = || {
        Error::Solver(format!(
            "probe Gram matrix is singular at lambda = {lambda}; use lambda > 0"
        ))
    };
    if n <= d {
        // dual form: G = Hᵀ (HHᵀ + λI)⁻¹ Y
        let gram = h * h.transpose() + DMatrix::identity(n, n) * lambda;
        let coef = gram.lu().solve(y).ok_or_else(singular)?;
        Ok(h.transpose() * coef)
    } else {
        let gram = h.transpose() * h + DMatrix::identity(d, d) * lambda;
        gram.lu().solve(&(h.transpose() * y)).ok_or_else(singular)
    }
    .and_then(|g| {
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(singular())
        }
    })
}

fn logistic(
    h: &DMatrix<f64>,
    labels: &[usize],
    c: usize,
    lambda: f64,
    iterations: usize,
) -> DMatrix<f64> {
    let (n, d) = h.shape();
    let mut g = DMatrix::<f64>::zeros(d, c);
    // softmax cross-entropy is (‖H‖²/n)-smooth
    let lip = h.norm_squared() / n as f64 + lambda;
    let step = 1.0 / lip.max(f64::MIN_POSITIVE);
    for _ in 0..iterations {
        let logits = h * &g;
        let mut resid = DMatrix::<f64>::zeros(n, c);
        for i in 0..n {
            let row: Vec<f64> = logits.row(i).iter().copied().collect();
            let p = softmax(&row);
            for k in 0..c {
                resid[(i, k)] = (p[k] - f64::from(u8::from(labels[i] == k))) / n as f64;
            }
        }
        let grad = h.transpose() * resid + &g * lambda;
        g -= grad * step;
    }
    g
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Train accuracy of a probe head on raw features.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], head: &Dense) -> f64 {
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| super::task::argmax(&head.matvec_t(f)) == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}
