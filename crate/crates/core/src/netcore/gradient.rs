use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::model::{check_input, check_logit, Model};

/// Flattened `∇_θ f_c(ξ)` over every trainable coordinate, in layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientFeatures {
    pub example_id: u64,
    pub logit: usize,
    pub values: Vec<f64>,
    pub norm: f64,
    /// Set by the finite-difference oracle when a coordinate's difference
    /// quotient lost all significant digits.
    #[serde(default)]
    pub underflow_warning: bool,
}

impl GradientFeatures {
    pub fn new(example_id: u64, logit: usize, values: Vec<f64>) -> Self {
        let norm = norm2(&values);
        Self {
            example_id,
            logit,
            values,
            norm,
            underflow_warning: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Exact reverse-mode gradient of logit `logit_index` at `input`.
pub fn per_example_gradient(
    model: &dyn Model,
    example_id: u64,
    input: &[f64],
    logit_index: usize,
) -> Result<GradientFeatures> {
    check_logit(model, logit_index)?;
    let mut rows = model.jacobian_rows(input, &[logit_index])?;
    Ok(GradientFeatures::new(
        example_id,
        logit_index,
        rows.pop().expect("one row"),
    ))
}

/// Central-difference gradient, one coordinate at a time. `O(#params)` forward
/// passes; meant for verifying [`per_example_gradient`].
pub fn finite_diff_gradient<M: Model + Clone>(
    model: &M,
    example_id: u64,
    input: &[f64],
    logit_index: usize,
    step: f64,
) -> Result<GradientFeatures> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    check_input(model, input)?;
    check_logit(model, logit_index)?;
    let mut probe = model.clone();
    let mut values = Vec::with_capacity(model.num_parameters());
    let mut underflow = false;
    for i in 0..model.num_parameters() {
        probe.nudge(i, step)?;
        let plus = probe.forward(input)?[logit_index];
        probe.nudge(i, -2.0 * step)?;
        let minus = probe.forward(input)?[logit_index];
        probe.set_parameters(&model.parameters())?;
        let diff = plus - minus;
        if diff == 0.0 && plus != 0.0 {
            underflow = true;
        }
        values.push(diff / (2.0 * step));
    }
    let mut g = GradientFeatures::new(example_id, logit_index, values);
    g.underflow_warning = underflow;
    Ok(g)
}

/// `‖a − b‖₂ / ‖b‖₂`, or the absolute error when `b` is zero.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let denom = norm2(b);
    if denom == 0.0 {
        norm2(&diff)
    } else {
        norm2(&diff) / denom
    }
}
