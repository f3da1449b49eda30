use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{same_architecture, Thresholds, LINEARIZATION_DELTA, RATIO_CLAMP};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{
    compute_features, gram, kernel_relative_distance, FeatureMode, KernelDistance, KernelKind,
};
use crate::linalg::{dot, norm2};
use crate::model::Model;
use crate::netcore::argmax;
use crate::optim::{output_derivative, LossKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLinearization {
    pub example_id: u64,
    /// `‖Δf − JΔθ‖ / (‖Δf‖ + δ)`.
    pub relative_error: f64,
    pub delta_f_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationReport {
    pub probes: Vec<ProbeLinearization>,
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    pub acc_pt: f64,
    pub acc_lin: f64,
    pub acc_ft: f64,
    /// `(acc_lin − acc_pt) / (acc_ft − acc_pt)`; `None` when fine-tuning did
    /// not change accuracy.
    pub ratio_raw: Option<f64>,
    /// Raw ratio clamped to `[−1, 2]`. With a zero denominator it is `1` when
    /// the linearized accuracy equals the fine-tuned one, else the clamp end
    /// on the side of the difference.
    pub ratio: f64,
}

fn accuracy(decisions: &[usize], labels: &[usize]) -> f64 {
    decisions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub(crate) fn linearization_ratio(acc_pt: f64, acc_lin: f64, acc_ft: f64) -> (Option<f64>, f64) {
    let den = acc_ft - acc_pt;
    let num = acc_lin - acc_pt;
    if den == 0.0 {
        let r = if acc_lin == acc_ft {
            1.0
        } else if acc_lin > acc_ft {
            RATIO_CLAMP.1
        } else {
            RATIO_CLAMP.0
        };
        return (None, r);
    }
    let raw = num / den;
    (Some(raw), raw.clamp(RATIO_CLAMP.0, RATIO_CLAMP.1))
}

/// First-order Taylor check of `post` around `pre` on labelled probe points.
pub fn linearization_report(
    pre: &dyn Model,
    post: &dyn Model,
    probes: &Dataset,
) -> Result<LinearizationReport> {
    same_architecture(pre, post)?;
    probes.ensure_non_empty()?;
    let theta0 = pre.parameters();
    let dtheta: Vec<f64> = post
        .parameters()
        .iter()
        .zip(&theta0)
        .map(|(a, b)| a - b)
        .collect();
    let logits: Vec<usize> = (0..pre.output_dim()).collect();
    let rows = probes
        .examples
        .par_iter()
        .map(|ex| {
            let f0 = pre.forward(&ex.input)?;
            let f1 = post.forward(&ex.input)?;
            let jac = pre.jacobian_rows(&ex.input, &logits)?;
            let lin: Vec<f64> = f0
                .iter()
                .zip(&jac)
                .map(|(f, j)| f + dot(j, &dtheta))
                .collect();
            let df: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
            let err: Vec<f64> = f1.iter().zip(&lin).map(|(a, b)| a - b).collect();
            let dn = norm2(&df);
            let probe = ProbeLinearization {
                example_id: ex.id,
                relative_error: norm2(&err) / (dn + LINEARIZATION_DELTA),
                delta_f_norm: dn,
            };
            Ok((probe, argmax(&f0), argmax(&lin), argmax(&f1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = probes.labels();
    let pick = |k: usize| -> Vec<usize> {
        rows.iter()
            .map(|r| match k {
                0 => r.1,
                1 => r.2,
                _ => r.3,
            })
            .collect()
    };
    let (acc_pt, acc_lin, acc_ft) = (
        accuracy(&pick(0), &labels),
        accuracy(&pick(1), &labels),
        accuracy(&pick(2), &labels),
    );
    let probes: Vec<ProbeLinearization> = rows.into_iter().map(|r| r.0).collect();
    let mean = probes.iter().map(|p| p.relative_error).sum::<f64>() / probes.len() as f64;
    let max = probes.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    let (ratio_raw, ratio) = linearization_ratio(acc_pt, acc_lin, acc_ft);
    Ok(LinearizationReport {
        probes,
        mean_relative_error: mean,
        max_relative_error: max,
        acc_pt,
        acc_lin,
        acc_ft,
        ratio_raw,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDrift {
    pub name: String,
    pub trainable: bool,
    /// `max_ξ ‖∇_M f_post(ξ) − ∇_M f_pre(ξ)‖² / max_ξ′ ‖∇_M f_pre(ξ′)‖²`, with
    /// the squared norm summed over logits.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedFeaturesReport {
    pub matrices: Vec<MatrixDrift>,
    /// Largest drift among trainable matrices.
    pub max_drift: f64,
    /// Post-vs-pre `K^(SGD)` distance on the same examples and logits.
    pub kernel: KernelDistance,
}

/// Gradient drift per parameter block and `K^(SGD)` drift on `dataset`.
pub fn fixed_features_report(
    pre: &dyn Model,
    post: &dyn Model,
    dataset: &Dataset,
) -> Result<FixedFeaturesReport> {
    same_architecture(pre, post)?;
    dataset.ensure_non_empty()?;
    let layout = pre.layout();
    let logits: Vec<usize> = (0..pre.output_dim()).collect();
    let nb = layout.blocks.len();
    // per example: (‖Δ∇_M‖², ‖∇_M f_pre‖²) for every block
    let per_example = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let a = pre.jacobian_rows(&ex.input, &logits)?;
            let b = post.jacobian_rows(&ex.input, &logits)?;
            let mut diff = vec![0.0; nb];
            let mut base = vec![0.0; nb];
            for (ra, rb) in a.iter().zip(&b) {
                for (k, blk) in layout.blocks.iter().enumerate() {
                    let r = blk.range();
                    base[k] += dot(&ra[r.clone()], &ra[r.clone()]);
                    diff[k] += ra[r.clone()]
                        .iter()
                        .zip(&rb[r])
                        .map(|(x, y)| (y - x) * (y - x))
                        .sum::<f64>();
                }
            }
            Ok((diff, base))
        })
        .collect::<Result<Vec<_>>>()?;
    let matrices: Vec<MatrixDrift> = layout
        .blocks
        .iter()
        .enumerate()
        .map(|(k, blk)| {
            let num = per_example.iter().map(|(d, _)| d[k]).fold(0.0, f64::max);
            let den = per_example.iter().map(|(_, b)| b[k]).fold(0.0, f64::max);
            let drift = if den > 0.0 {
                num / den
            } else if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            MatrixDrift {
                name: blk.name.clone(),
                trainable: blk.lr_scale > 0.0,
                drift,
            }
        })
        .collect();
    let max_drift = matrices
        .iter()
        .filter(|m| m.trainable)
        .map(|m| m.drift)
        .fold(0.0, f64::max);
    let k_pre = {
        let f = compute_features(pre, dataset, &logits, FeatureMode::Plain)?;
        gram(&f, &f, KernelKind::Sgd)?
    };
    let k_post = {
        let f = compute_features(post, dataset, &logits, FeatureMode::Plain)?;
        gram(&f, &f, KernelKind::Sgd)?
    };
    let kernel = kernel_relative_distance(&k_post.values, &k_pre.values)?;
    Ok(FixedFeaturesReport {
        matrices,
        max_drift,
        kernel,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiStats {
    /// Mean over examples of `‖χ(ξ, y)‖∞`.
    pub mean: f64,
    /// Max over examples of `‖χ(ξ, y)‖∞`.
    pub max: f64,
}

pub fn chi_stats(model: &dyn Model, dataset: &Dataset, loss: LossKind) -> Result<ChiStats> {
    dataset.ensure_non_empty()?;
    let norms = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let chi = output_derivative(&model.forward(&ex.input)?, ex.label, loss)?;
            Ok(chi.iter().fold(0.0f64, |m, c| m.max(c.abs())))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ChiStats {
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
        max: norms.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub linearization: bool,
    pub kernel_drift: bool,
}

impl Verdicts {
    pub fn evaluate(lin: &LinearizationReport, ff: &FixedFeaturesReport, t: &Thresholds) -> Self {
        Self {
            linearization: lin.ratio >= t.min_linearization_ratio,
            kernel_drift: ff.kernel.mean_elementwise_relative < t.max_kernel_drift,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub linearization: LinearizationReport,
    pub fixed_features: FixedFeaturesReport,
    pub chi: ChiStats,
    pub thresholds: Thresholds,
    pub verdicts: Verdicts,
}

/// Full kernel-behavior report for one fine-tuning run. `train` supplies the
/// feature drift and `χ` at `pre`; `probes` supply the linearization check.
pub fn diagnose(
    pre: &dyn Model,
    post: &dyn Model,
    train: &Dataset,
    probes: &Dataset,
    loss: LossKind,
    thresholds: Thresholds,
) -> Result<DiagnosticsReport> {
    if train.is_empty() {
        return Err(Error::input("diagnostics need a non-empty training set"));
    }
    let linearization = linearization_report(pre, post, probes)?;
    let fixed_features = fixed_features_report(pre, post, train)?;
    let chi = chi_stats(pre, train, loss)?;
    let verdicts = Verdicts::evaluate(&linearization, &fixed_features, &thresholds);
    Ok(DiagnosticsReport {
        linearization,
        fixed_features,
        chi,
        thresholds,
        verdicts,
    })
}
