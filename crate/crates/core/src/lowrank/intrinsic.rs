use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{compute_features, gram, FeatureMode, GramMatrix, KernelKind};
use crate::linalg::Dense;
use crate::model::{Model, ParamLayout};

/// A random `M × k` projection with `N(0, 1/k)` entries, reproducible from
/// `(seed, dims)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub ambient_dim: usize,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("projection dimension k must be at least 1"));
        }
        if self.k > self.ambient_dim {
            return Err(Error::config(format!(
                "projection dimension {} exceeds parameter count {}",
                self.k, self.ambient_dim
            )));
        }
        Ok(())
    }

    pub fn draw(&self) -> Result<Dense> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(Dense::gaussian(
            self.ambient_dim,
            self.k,
            (1.0 / self.k as f64).sqrt(),
            &mut rng,
        ))
    }
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), from the QR
/// factorization of a seeded Gaussian matrix.
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Result<Dense> {
    if cols == 0 || rows < cols {
        return Err(Error::config(format!(
            "need rows >= cols >= 1, got {rows} x {cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Dense::gaussian(rows, cols, 1.0, &mut rng);
    let q = DMatrix::from_row_slice(rows, cols, g.as_slice()).qr().q();
    let mut out = Dense::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, q[(r, c)]);
        }
    }
    Ok(out)
}

/// `θ = θ₀ + Π·θ̂` with `θ₀` frozen and only `θ̂` trainable.
#[derive(Clone, Debug)]
pub struct IntrinsicNetwork<M> {
    theta0: Vec<f64>,
    projection: Dense,
    theta_hat: Vec<f64>,
    lr_scale: f64,
    effective: M,
}

/// Wrap `params` with `θ̂ = 0`, so outputs equal the base network's.
pub fn intrinsic_attach<M: Model + Clone>(
    params: &M,
    config: &ProjectionConfig,
) -> Result<IntrinsicNetwork<M>> {
    if config.ambient_dim != params.num_parameters() {
        return Err(Error::config(format!(
            "projection ambient dimension {} does not match {} parameters",
            config.ambient_dim,
            params.num_parameters()
        )));
    }
    IntrinsicNetwork::with_projection(params, config.draw()?)
}

impl<M: Model + Clone> IntrinsicNetwork<M> {
    pub fn with_projection(params: &M, projection: Dense) -> Result<Self> {
        if projection.rows() != params.num_parameters() || projection.cols() == 0 {
            return Err(Error::shape(format!(
                "projection is {} x {}, model has {} parameters",
                projection.rows(),
                projection.cols(),
                params.num_parameters()
            )));
        }
        Ok(Self {
            theta0: params.parameters(),
            theta_hat: vec![0.0; projection.cols()],
            projection,
            lr_scale: 1.0,
            effective: params.clone(),
        })
    }

    pub fn with_lr_scale(mut self, lr_scale: f64) -> Self {
        self.lr_scale = lr_scale;
        self
    }

    pub fn projection(&self) -> &Dense {
        &self.projection
    }

    /// The base model at `θ₀ + Π·θ̂`.
    pub fn effective(&self) -> &M {
        &self.effective
    }
}

impl<M: Model + Clone> Model for IntrinsicNetwork<M> {
    fn input_dim(&self) -> usize {
        self.effective.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.effective.output_dim()
    }

    fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::default();
        layout.push("theta_hat", 1, self.theta_hat.len(), self.lr_scale);
        layout
    }

    fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.effective.forward(input)
    }

    fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let g = self.effective.vjp(input, cotangent)?;
        Ok(self.projection.matvec_t(&g))
    }

    fn parameters(&self) -> Vec<f64> {
        self.theta_hat.clone()
    }

    fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_hat.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.theta_hat.len(),
                theta.len()
            )));
        }
        self.theta_hat.copy_from_slice(theta);
        let mut full = self.projection.matvec(&self.theta_hat);
        full.iter_mut().zip(&self.theta0).for_each(|(p, t)| *p += t);
        self.effective.set_parameters(&full)
    }

    fn num_parameters(&self) -> usize {
        self.theta_hat.len()
    }
}

/// `K_ID(i, j) = ⟨Πᵀ∇f_i, Πᵀ∇f_j⟩`, class-major.
pub fn id_gram<M: Model + Clone>(
    model: &IntrinsicNetwork<M>,
    dataset: &Dataset,
    logits: &[usize],
) -> Result<GramMatrix> {
    let f = compute_features(model, dataset, logits, FeatureMode::Plain)?;
    gram(&f, &f, KernelKind::Sgd)
}
