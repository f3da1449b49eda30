//! Kernel regression on precomputed Gram matrices: ridge and logistic for the
//! symmetric kernels, the augmented two-sided system for the asymmetric one.
//!
//! Multi-class problems use the class-major `CN × CN` layout of
//! [`GramMatrix`]: row `c · N + i` is a binary problem "does example `i`
//! belong to class `c`", and the per-class outputs are read back in the same
//! order.

mod linear;
mod metrics;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, KernelKind};
use crate::netcore::argmax;

pub use linear::{
    asymmetric_solve, logistic_objective, logistic_solve, operator_norm, ridge_solve,
    LogisticSolution, POWER_ITERATIONS, POWER_TOL,
};
pub use metrics::{confusion_matrix, evaluate, Metrics};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverLoss {
    #[default]
    Ridge,
    Logistic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEncoding {
    /// `1` for the true class, `0` elsewhere.
    #[default]
    OneHot,
    /// `+1` for the true class, `−1` elsewhere.
    PlusMinus,
}

impl TargetEncoding {
    fn value(self, is_label: bool) -> f64 {
        match (self, is_label) {
            (_, true) => 1.0,
            (TargetEncoding::OneHot, false) => 0.0,
            (TargetEncoding::PlusMinus, false) => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default)]
    pub loss: SolverLoss,
    /// Regularization candidates as multiples of `‖K‖_op`.
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Label scales `s`; targets become `s · onehot − f0`. `None` means `∞`,
    /// which ignores the pre-trained logits.
    #[serde(default = "default_scale_grid")]
    pub label_scale_grid: Vec<Option<f64>>,
    #[serde(default = "default_gamma_grid")]
    pub gamma_grid: Vec<f64>,
    /// Asymmetric predictor `c · f_s + (1 − c) · f_t`.
    #[serde(default = "default_combine")]
    pub combine_weight: f64,
    #[serde(default)]
    pub encoding: TargetEncoding,
    #[serde(default = "default_max_iters")]
    pub logistic_max_iters: usize,
    #[serde(default = "default_tol")]
    pub logistic_tol: f64,
}

fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.001, 0.01, 0.1, 1.0]
}
fn default_scale_grid() -> Vec<Option<f64>> {
    vec![Some(10.0), Some(100.0), Some(1000.0), Some(10000.0), None]
}
fn default_gamma_grid() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0]
}
fn default_combine() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    20_000
}
fn default_tol() -> f64 {
    1e-8
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            loss: SolverLoss::Ridge,
            lambda_grid: default_lambda_grid(),
            label_scale_grid: default_scale_grid(),
            gamma_grid: default_gamma_grid(),
            combine_weight: default_combine(),
            encoding: TargetEncoding::OneHot,
            logistic_max_iters: default_max_iters(),
            logistic_tol: default_tol(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty()
            || self.label_scale_grid.is_empty()
            || self.gamma_grid.is_empty()
        {
            return Err(Error::config("hyperparameter grids must be non-empty"));
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::config("gamma must be positive"));
        }
        if self
            .label_scale_grid
            .iter()
            .flatten()
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(Error::config(
                "label scales must be positive (use null for infinity)",
            ));
        }
        if !(0.0..=1.0).contains(&self.combine_weight) {
            return Err(Error::config(format!(
                "combine weight must lie in [0, 1], got {}",
                self.combine_weight
            )));
        }
        if !(self.logistic_tol > 0.0) {
            return Err(Error::config("logistic tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Ridge,
    Logistic,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Regularization relative to `‖K‖_op` (symmetric fits).
    pub lambda_rel: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    /// `None` is the infinite scale.
    pub label_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: FitMethod,
    pub kernel: KernelKind,
    pub num_classes: usize,
    pub encoding: TargetEncoding,
    pub combine_weight: f64,
    pub hyper: Hyperparameters,
    pub op_norm: f64,
    /// Training rows `(example id, logit)`, class-major.
    pub train_ids: Vec<(u64, usize)>,
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Per-row `±1` labels of the asymmetric system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signs: Option<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub train_metrics: Option<Metrics>,
    pub validation_metrics: Option<Metrics>,
    pub gram_params_hash: String,
    pub gram_dataset_hash: String,
}

impl FitResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Labels and optional pre-trained logits for the examples behind a Gram's rows.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub gram: &'a GramMatrix,
    pub labels: &'a [usize],
    /// `f0[i][c]`: pre-trained logit `c` of example `i`.
    pub f0: Option<&'a [Vec<f64>]>,
}

fn examples_per_class(gram: &GramMatrix, rows: bool) -> Result<usize> {
    let total = if rows { gram.rows() } else { gram.cols() };
    if gram.num_classes == 0 || total % gram.num_classes != 0 {
        return Err(Error::shape(format!(
            "{total} Gram rows do not split into {} classes",
            gram.num_classes
        )));
    }
    Ok(total / gram.num_classes)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} examples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn check_f0(f0: Option<&[Vec<f64>]>, n: usize, classes: usize) -> Result<()> {
    if let Some(f0) = f0 {
        if f0.len() != n || f0.iter().any(|r| r.len() != classes) {
            return Err(Error::shape(format!(
                "pre-trained logits must be {n}×{classes}"
            )));
        }
    }
    Ok(())
}

fn f0_at(f0: Option<&[Vec<f64>]>, i: usize, c: usize) -> f64 {
    f0.map_or(0.0, |f| f[i][c])
}

/// `±1` per class-major row.
pub fn row_signs(labels: &[usize], classes: usize) -> Vec<f64> {
    (0..classes)
        .flat_map(|c| labels.iter().map(move |&y| if y == c { 1.0 } else { -1.0 }))
        .collect()
}

/// Class-major regression targets `s · enc(y) − f0`, or `enc(y)` at `s = ∞`.
pub fn row_targets(
    labels: &[usize],
    classes: usize,
    encoding: TargetEncoding,
    label_scale: Option<f64>,
    f0: Option<&[Vec<f64>]>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(labels.len() * classes);
    for c in 0..classes {
        for (i, &y) in labels.iter().enumerate() {
            let t = encoding.value(y == c);
            out.push(match label_scale {
                Some(s) => s * t - f0_at(f0, i, c),
                None => t,
            });
        }
    }
    out
}

fn check_square(gram: &GramMatrix) -> Result<()> {
    if gram.rows() != gram.cols() || gram.row_ids != gram.col_ids {
        return Err(Error::shape(
            "training Gram must have identical row and column examples",
        ));
    }
    Ok(())
}

fn scaled_f0(f0: Option<&[Vec<f64>]>, label_scale: Option<f64>, i: usize, c: usize) -> f64 {
    match label_scale {
        Some(s) => f0_at(f0, i, c) / s,
        None => 0.0,
    }
}

/// Fits `(K + λI)α = s·onehot − f0` (ridge) or the regularized logistic loss
/// on `±1` rows with margins `Kα + f0/s`. `lambda_rel` multiplies `‖K‖_op`.
pub fn fit_symmetric(
    train: Split<'_>,
    lambda_rel: f64,
    label_scale: Option<f64>,
    config: &SolveConfig,
) -> Result<FitResult> {
    let k = train.gram;
    check_square(k)?;
    if !k.kind.is_symmetric() {
        return Err(Error::config(
            "symmetric solver given an asymmetric kernel; use fit_asymmetric",
        ));
    }
    let scale = k
        .values
        .as_slice()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if k.max_abs_asymmetry() > 1e-10 * scale.max(1.0) {
        return Err(Error::input("training Gram is not symmetric"));
    }
    let classes = k.num_classes;
    let n = examples_per_class(k, true)?;
    check_labels(train.labels, n, classes)?;
    check_f0(train.f0, n, classes)?;
    let op = operator_norm(&k.values);
    let lambda = lambda_rel * op;
    let (method, alpha, converged, iterations) = match config.loss {
        SolverLoss::Ridge => {
            let y = row_targets(
                train.labels,
                classes,
                config.encoding,
                label_scale,
                train.f0,
            );
            (
                FitMethod::Ridge,
                ridge_solve(&k.values, &y, lambda)?,
                true,
                0,
            )
        }
        SolverLoss::Logistic => {
            let signs = row_signs(train.labels, classes);
            let offsets: Vec<f64> = (0..classes)
                .flat_map(|c| (0..n).map(move |i| (c, i)))
                .map(|(c, i)| scaled_f0(train.f0, label_scale, i, c))
                .collect();
            let sol = logistic_solve(
                &k.values,
                &signs,
                &offsets,
                lambda,
                config.logistic_max_iters,
                config.logistic_tol,
            )?;
            (
                FitMethod::Logistic,
                sol.alpha,
                sol.converged,
                sol.iterations,
            )
        }
    };
    let mut fit = FitResult {
        method,
        kernel: k.kind,
        num_classes: classes,
        encoding: config.encoding,
        combine_weight: 1.0,
        hyper: Hyperparameters {
            lambda_rel: Some(lambda_rel),
            lambda: Some(lambda),
            gamma: None,
            label_scale,
        },
        op_norm: op,
        train_ids: k.row_ids.clone(),
        alpha,
        beta: None,
        signs: None,
        converged,
        iterations,
        train_metrics: None,
        validation_metrics: None,
        gram_params_hash: k.provenance.params_hash.clone(),
        gram_dataset_hash: k.provenance.dataset_hash.clone(),
    };
    let pred = predict(k, &fit, train.f0, None)?;
    fit.train_metrics = Some(evaluate(&pred.decisions, train.labels)?);
    Ok(fit)
}

/// Solves the augmented system for `K(x_i, x_j) = ⟨φ_s(x_i), φ_t(x_j)⟩`.
pub fn fit_asymmetric(
    train: Split<'_>,
    gamma: f64,
    label_scale: Option<f64>,
    config: &SolveConfig,
) -> Result<FitResult> {
    let k = train.gram;
    check_square(k)?;
    let classes = k.num_classes;
    let n = examples_per_class(k, true)?;
    check_labels(train.labels, n, classes)?;
    check_f0(train.f0, n, classes)?;
    let signs = row_signs(train.labels, classes);
    let (alpha, beta) = asymmetric_solve(&k.values, &signs, gamma)?;
    let mut fit = FitResult {
        method: FitMethod::Asymmetric,
        kernel: k.kind,
        num_classes: classes,
        encoding: TargetEncoding::PlusMinus,
        combine_weight: config.combine_weight,
        hyper: Hyperparameters {
            lambda_rel: None,
            lambda: None,
            gamma: Some(gamma),
            label_scale,
        },
        op_norm: operator_norm(&k.values),
        train_ids: k.row_ids.clone(),
        alpha,
        beta: Some(beta),
        signs: Some(signs),
        converged: true,
        iterations: 0,
        train_metrics: None,
        validation_metrics: None,
        gram_params_hash: k.provenance.params_hash.clone(),
        gram_dataset_hash: k.provenance.dataset_hash.clone(),
    };
    let pred = predict(k, &fit, train.f0, Some(k))?;
    fit.train_metrics = Some(evaluate(&pred.decisions, train.labels)?);
    Ok(fit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `logits[j][c]` for test example `j`.
    pub logits: Vec<Vec<f64>>,
    /// Argmax per example, lowest index on ties.
    pub decisions: Vec<usize>,
}

fn reshape(out: &[f64], m: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|j| (0..classes).map(|c| out[c * m + j]).collect())
        .collect()
}

/// Kernel outputs for test examples. `k_test_train` has test rows and
/// training columns. Asymmetric fits with `combine_weight < 1` also need
/// `k_train_test` (training rows, test columns) for the `f_t` side.
pub fn predict(
    k_test_train: &GramMatrix,
    fit: &FitResult,
    f0: Option<&[Vec<f64>]>,
    k_train_test: Option<&GramMatrix>,
) -> Result<Prediction> {
    if k_test_train.col_ids != fit.train_ids {
        return Err(Error::input(
            "test Gram columns do not match the fit's training rows",
        ));
    }
    if k_test_train.num_classes != fit.num_classes {
        return Err(Error::input(format!(
            "test Gram has {} classes, fit has {}",
            k_test_train.num_classes, fit.num_classes
        )));
    }
    let classes = fit.num_classes;
    let m = examples_per_class(k_test_train, true)?;
    check_f0(f0, m, classes)?;
    let out = match fit.method {
        FitMethod::Ridge | FitMethod::Logistic => k_test_train.values.matvec(&fit.alpha),
        FitMethod::Asymmetric => {
            let signs = fit
                .signs
                .as_ref()
                .ok_or_else(|| Error::input("asymmetric fit is missing its signs"))?;
            let beta = fit
                .beta
                .as_ref()
                .ok_or_else(|| Error::input("asymmetric fit is missing β"))?;
            let by: Vec<f64> = beta.iter().zip(signs).map(|(b, s)| b * s).collect();
            let mut f = k_test_train.values.matvec(&by);
            let c = fit.combine_weight;
            if c < 1.0 {
                let kt = k_train_test.ok_or_else(|| {
                    Error::input(
                        "combine weight below 1 needs the training-rows × test-columns Gram",
                    )
                })?;
                if kt.row_ids != fit.train_ids || kt.col_ids != k_test_train.row_ids {
                    return Err(Error::input(
                        "transposed Gram does not match the test and training sets",
                    ));
                }
                let ay: Vec<f64> = fit.alpha.iter().zip(signs).map(|(a, s)| a * s).collect();
                let ft = kt.values.matvec_t(&ay);
                for (x, t) in f.iter_mut().zip(ft) {
                    *x = c * *x + (1.0 - c) * t;
                }
            }
            f
        }
    };
    let mut logits = reshape(&out, m, classes);
    for (j, row) in logits.iter_mut().enumerate() {
        for (c, z) in row.iter_mut().enumerate() {
            *z += match fit.method {
                FitMethod::Ridge => fit.hyper.label_scale.map_or(0.0, |_| f0_at(f0, j, c)),
                FitMethod::Logistic | FitMethod::Asymmetric => {
                    scaled_f0(f0, fit.hyper.label_scale, j, c)
                }
            };
        }
    }
    let decisions = logits.iter().map(|l| argmax(l)).collect();
    Ok(Prediction { logits, decisions })
}

/// Exhaustive search over the configured grids, ranked by validation
/// accuracy; ties go to the earliest cell in grid order (regularization or γ
/// outer, label scale inner). Cells whose solve fails are skipped.
pub fn grid_search(
    train: Split<'_>,
    validation: Split<'_>,
    train_validation: Option<&GramMatrix>,
    config: &SolveConfig,
) -> Result<FitResult> {
    config.validate()?;
    let asymmetric = !train.gram.kind.is_symmetric();
    let outer: &[f64] = if asymmetric {
        &config.gamma_grid
    } else {
        &config.lambda_grid
    };
    let cells: Vec<(f64, Option<f64>)> = outer
        .iter()
        .flat_map(|&a| config.label_scale_grid.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<Result<FitResult>> = cells
        .par_iter()
        .map(|&(a, s)| {
            let mut fit = if asymmetric {
                fit_asymmetric(train, a, s, config)?
            } else {
                fit_symmetric(train, a, s, config)?
            };
            let pred = predict(validation.gram, &fit, validation.f0, train_validation)?;
            fit.validation_metrics = Some(evaluate(&pred.decisions, validation.labels)?);
            Ok(fit)
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(fit) => {
                let acc = fit.validation_metrics.map_or(0.0, |m| m.accuracy);
                if best
                    .as_ref()
                    .is_none_or(|b| acc > b.validation_metrics.map_or(0.0, |m| m.accuracy))
                {
                    best = Some(fit);
                }
            }
            Err(e @ (Error::Solver(_) | Error::Numeric(_))) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Solver("no grid cell produced a fit".into()))
    })
}

/// CSV `id,label,pred,logit_0..logit_{C−1}`.
pub fn write_predictions_csv<W: Write>(
    w: W,
    ids: &[u64],
    labels: &[usize],
    pred: &Prediction,
) -> Result<()> {
    if ids.len() != pred.decisions.len() || labels.len() != ids.len() {
        return Err(Error::shape(
            "ids, labels and predictions must have equal lengths",
        ));
    }
    let mut out = csv::Writer::from_writer(w);
    let classes = pred.logits.first().map_or(0, |l| l.len());
    let mut header = vec!["id".to_string(), "label".into(), "pred".into()];
    header.extend((0..classes).map(|c| format!("logit_{c}")));
    let fmt = |e: csv::Error| Error::Format(format!("csv: {e}"));
    out.write_record(&header).map_err(fmt)?;
    for (j, &id) in ids.iter().enumerate() {
        let mut rec = vec![
            id.to_string(),
            labels[j].to_string(),
            pred.decisions[j].to_string(),
        ];
        rec.extend(pred.logits[j].iter().map(|z| format!("{z:?}")));
        out.write_record(&rec).map_err(fmt)?;
    }
    out.flush()?;
    Ok(())
}
