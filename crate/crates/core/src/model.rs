//! The differentiable-model abstraction shared by plain networks, LoRA-wrapped
//! networks and intrinsic-dimension wrappers.
//!
//! Everything downstream (optimizers, feature maps, kernel checks) sees a
//! model only as a function `f(ξ; θ)` over a flat vector of trainable
//! coordinates `θ`, partitioned into named blocks that each carry a
//! learning-rate scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Per-block multiplier on the optimizer's base learning rate. Zero means frozen.
    pub lr_scale: f64,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, lr_scale: f64) {
        let offset = self.len();
        self.blocks.push(ParamBlock {
            name: name.into(),
            rows,
            cols,
            offset,
            lr_scale,
        });
    }

    /// Total number of trainable coordinates.
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Per-coordinate learning-rate scales, expanded from the block scales.
    pub fn lr_scales(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.blocks {
            out.extend(std::iter::repeat_n(b.lr_scale, b.len()));
        }
        out
    }
}

/// A function `f(ξ; θ)` with exact reverse-mode derivatives.
pub trait Model: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn layout(&self) -> ParamLayout;

    fn forward(&self, input: &[f64]) -> Result<Vec<f64>>;

    /// Gradient of `⟨cotangent, f(input)⟩` with respect to the trainable coordinates.
    fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>>;

    /// Flat copy of the trainable coordinates in layout order.
    fn parameters(&self) -> Vec<f64>;

    fn set_parameters(&mut self, theta: &[f64]) -> Result<()>;

    /// Rows of the Jacobian for the requested logits.
    fn jacobian_rows(&self, input: &[f64], logits: &[usize]) -> Result<Vec<Vec<f64>>> {
        let d = self.output_dim();
        logits
            .iter()
            .map(|&c| {
                let mut e = vec![0.0; d];
                e[c] = 1.0;
                self.vjp(input, &e)
            })
            .collect()
    }

    /// Add `delta` to a single coordinate. Used by finite-difference oracles.
    fn nudge(&mut self, index: usize, delta: f64) -> Result<()> {
        let mut theta = self.parameters();
        theta[index] += delta;
        self.set_parameters(&theta)
    }

    fn num_parameters(&self) -> usize {
        self.layout().len()
    }

    /// `out += scale · vjp(input, cotangent)`.
    fn accumulate_vjp(
        &self,
        input: &[f64],
        cotangent: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let g = self.vjp(input, cotangent)?;
        if g.len() != out.len() {
            return Err(Error::shape(format!(
                "accumulator has {} coordinates, model has {}",
                out.len(),
                g.len()
            )));
        }
        crate::linalg::axpy(scale, &g, out);
        Ok(())
    }

    /// `θ += delta`.
    fn add_to_parameters(&mut self, delta: &[f64]) -> Result<()> {
        let mut theta = self.parameters();
        if theta.len() != delta.len() {
            return Err(Error::shape(format!(
                "expected {} coordinates, got {}",
                theta.len(),
                delta.len()
            )));
        }
        theta.iter_mut().zip(delta).for_each(|(t, d)| *t += d);
        self.set_parameters(&theta)
    }
}

pub(crate) fn check_input(model: &dyn Model, input: &[f64]) -> Result<()> {
    if input.len() != model.input_dim() {
        return Err(Error::shape(format!(
            "input has length {}, model expects {}",
            input.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

pub(crate) fn check_logit(model: &dyn Model, logit: usize) -> Result<()> {
    if logit >= model.output_dim() {
        return Err(Error::input(format!(
            "logit index {logit} out of range for {} outputs",
            model.output_dim()
        )));
    }
    Ok(())
}
