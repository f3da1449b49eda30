use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{
    compute_features, gram, kernel_relative_distance, FeatureMode, FeatureSet, GramMatrix,
    KernelDistance, KernelKind,
};
use crate::linalg::{dot, Dense};
use crate::model::{Model, ParamLayout};
use crate::netcore::NetworkParams;
use crate::optim::OptimizerKind;

/// Per-entry standard deviation of the `A` factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scale", content = "value")]
pub enum AInit {
    /// `√(1/k)`: `AᵀA ≈ I` in expectation, the JL convention.
    #[default]
    InverseRank,
    /// `1/√cols`: the μP convention for training runs.
    InverseWidth,
    Std(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Matrix names (`U`, `W1`, …, `V`).
    pub targets: Vec<String>,
    #[serde(default)]
    pub a_init: AInit,
    pub lr_a: f64,
    pub lr_b: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LoraConfig {
    /// SGD learning-rate scales of one for both factors.
    pub fn new(rank: usize, targets: &[&str], seed: u64) -> Self {
        Self {
            rank,
            targets: targets.iter().map(|t| t.to_string()).collect(),
            a_init: AInit::InverseRank,
            lr_a: 1.0,
            lr_b: 1.0,
            seed,
        }
    }

    /// μP defaults: `A` init `1/√n`; factor learning rates `1` for SGD and
    /// `1/n` for SignGD and Adam.
    pub fn mup(
        rank: usize,
        targets: &[&str],
        family: OptimizerKind,
        width: usize,
        seed: u64,
    ) -> Self {
        let lr = match family {
            OptimizerKind::Sgd => 1.0,
            OptimizerKind::SignGd | OptimizerKind::Adam => 1.0 / width as f64,
        };
        Self {
            a_init: AInit::InverseWidth,
            lr_a: lr,
            lr_b: lr,
            ..Self::new(rank, targets, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("LoRA needs at least one target matrix"));
        }
        if !(self.lr_a >= 0.0 && self.lr_b >= 0.0) {
            return Err(Error::config(
                "LoRA learning-rate scales must be non-negative",
            ));
        }
        if let AInit::Std(s) = self.a_init {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(format!(
                    "A init std must be non-negative, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Low-rank update `B·A` on one stored matrix. `A` is `k × cols`, `B` is `rows × k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub target: usize,
    pub name: String,
    pub a: Dense,
    pub b: Dense,
    pub a_std: f64,
}

/// A frozen base network with trainable low-rank factors. The effective
/// weight of each target is `M + B·A`, applied with `M`'s multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraNetwork {
    base: NetworkParams,
    adapters: Vec<Adapter>,
    lr_a: f64,
    lr_b: f64,
    effective: NetworkParams,
}

/// Wraps `params` with `B = 0` and Gaussian `A`, so outputs are unchanged.
pub fn lora_attach(params: &NetworkParams, config: &LoraConfig) -> Result<LoraNetwork> {
    config.validate()?;
    let mut adapters = Vec::with_capacity(config.targets.len());
    for (i, name) in config.targets.iter().enumerate() {
        let target = params
            .matrix_index(name)
            .ok_or_else(|| Error::config(format!("no matrix named {name:?} to adapt")))?;
        if adapters.iter().any(|a: &Adapter| a.target == target) {
            return Err(Error::config(format!("matrix {name} listed twice")));
        }
        let m = &params.matrices[target].values;
        let (rows, cols) = (m.rows(), m.cols());
        if config.rank > rows.min(cols) {
            return Err(Error::config(format!(
                "rank {} exceeds min dimension of {name} ({rows} x {cols})",
                config.rank
            )));
        }
        let a_std = match config.a_init {
            AInit::InverseRank => (1.0 / config.rank as f64).sqrt(),
            AInit::InverseWidth => 1.0 / (cols as f64).sqrt(),
            AInit::Std(s) => s,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        adapters.push(Adapter {
            target,
            name: name.clone(),
            a: Dense::gaussian(config.rank, cols, a_std, &mut rng),
            b: Dense::zeros(rows, config.rank),
            a_std,
        });
    }
    let mut net = LoraNetwork {
        base: params.clone(),
        adapters,
        lr_a: config.lr_a,
        lr_b: config.lr_b,
        effective: params.clone(),
    };
    net.refresh();
    Ok(net)
}

impl LoraNetwork {
    pub fn base(&self) -> &NetworkParams {
        &self.base
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    /// The base network with every `B·A` merged in.
    pub fn merged(&self) -> &NetworkParams {
        &self.effective
    }

    /// Replace the `A` factor of the adapter on `name`.
    pub fn with_a(mut self, name: &str, a: Dense) -> Result<Self> {
        let ad = self
            .adapters
            .iter_mut()
            .find(|ad| ad.name == name)
            .ok_or_else(|| Error::config(format!("no adapter on {name:?}")))?;
        if (a.rows(), a.cols()) != (ad.a.rows(), ad.a.cols()) {
            return Err(Error::shape(format!(
                "A must be {} x {}, got {} x {}",
                ad.a.rows(),
                ad.a.cols(),
                a.rows(),
                a.cols()
            )));
        }
        ad.a = a;
        self.refresh();
        Ok(self)
    }

    fn refresh(&mut self) {
        for ad in &self.adapters {
            let mut w = self.base.matrices[ad.target].values.clone();
            w.add_assign(&ad.b.matmul(&ad.a));
            self.effective.matrices[ad.target].values = w;
        }
    }
}

impl Model for LoraNetwork {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.base.output_dim()
    }

    fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::default();
        for ad in &self.adapters {
            layout.push(
                format!("{}.A", ad.name),
                ad.a.rows(),
                ad.a.cols(),
                self.lr_a,
            );
            layout.push(
                format!("{}.B", ad.name),
                ad.b.rows(),
                ad.b.cols(),
                self.lr_b,
            );
        }
        layout
    }

    fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.effective.forward(input)
    }

    /// `dA = Bᵀ·G` and `dB = G·Aᵀ`, where `G` is the gradient with respect
    /// to the effective weight.
    fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let blocks = self.effective.gradient_blocks(input, cotangent)?;
        let mut out = Vec::with_capacity(self.num_parameters());
        for ad in &self.adapters {
            let g = &blocks[ad.target];
            out.extend_from_slice(ad.b.transpose().matmul(g).as_slice());
            out.extend_from_slice(g.matmul(&ad.a.transpose()).as_slice());
        }
        Ok(out)
    }

    fn parameters(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.num_parameters());
        for ad in &self.adapters {
            theta.extend_from_slice(ad.a.as_slice());
            theta.extend_from_slice(ad.b.as_slice());
        }
        theta
    }

    fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_parameters() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                theta.len()
            )));
        }
        let mut offset = 0;
        for ad in &mut self.adapters {
            for m in [&mut ad.a, &mut ad.b] {
                let len = m.len();
                m.as_mut_slice()
                    .copy_from_slice(&theta[offset..offset + len]);
                offset += len;
            }
        }
        self.refresh();
        Ok(())
    }

    fn num_parameters(&self) -> usize {
        self.adapters.iter().map(|ad| ad.a.len() + ad.b.len()).sum()
    }
}

/// Gradient of logit `logit` split as `G = dh·xᵀ` for a non-readout matrix:
/// `x` is the vector the matrix multiplies and `dh = ∂f/∂(M·x)` includes the
/// matrix multiplier.
pub fn layer_factors(
    net: &NetworkParams,
    target: usize,
    input: &[f64],
    logit: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if target >= net.depth() {
        return Err(Error::config(
            "layer factors are defined for U and hidden matrices, not the readout",
        ));
    }
    if logit >= net.output_dim() {
        return Err(Error::input(format!("logit index {logit} out of range")));
    }
    let x = net.layer_input(input, target)?;
    let mut e = vec![0.0; net.output_dim()];
    e[logit] = 1.0;
    let g = net.gradient_blocks(input, &e)?.swap_remove(target);
    let xx = dot(&x, &x);
    let mut dh = g.matvec(&x);
    if xx == 0.0 {
        dh.iter_mut().for_each(|v| *v = 0.0);
    } else {
        dh.iter_mut().for_each(|v| *v /= xx);
    }
    Ok((dh, x))
}

/// `max(‖dh‖², ‖x‖²)` over every example and logit.
pub fn measure_c(
    net: &NetworkParams,
    target: usize,
    dataset: &Dataset,
    logits: &[usize],
) -> Result<f64> {
    let mut c: f64 = 0.0;
    for ex in &dataset.examples {
        for &l in logits {
            let (dh, x) = layer_factors(net, target, &ex.input, l)?;
            c = c.max(dot(&dh, &dh)).max(dot(&x, &x));
        }
    }
    Ok(c)
}

/// Closed form `K_LoRA = dHdHᵀ ⊙ (XAᵀAXᵀ)` at `B = 0`, class-major.
pub fn lora_kernel_formula(
    net: &NetworkParams,
    target: usize,
    a: &Dense,
    dataset: &Dataset,
    logits: &[usize],
) -> Result<Dense> {
    let mut dh = Vec::new();
    let mut ax = Vec::new();
    for &l in logits {
        for ex in &dataset.examples {
            let (d, x) = layer_factors(net, target, &ex.input, l)?;
            if x.len() != a.cols() {
                return Err(Error::shape(format!(
                    "A has {} columns, layer input has {}",
                    a.cols(),
                    x.len()
                )));
            }
            dh.push(d);
            ax.push(a.matvec(&x));
        }
    }
    let n = dh.len();
    let mut k = Dense::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k.set(i, j, dot(&dh[i], &dh[j]) * dot(&ax[i], &ax[j]));
        }
    }
    Ok(k)
}

/// SGD Gram over the coordinates of one parameter block only.
pub fn block_gram(
    model: &dyn Model,
    dataset: &Dataset,
    logits: &[usize],
    block: &str,
) -> Result<GramMatrix> {
    let range = model
        .layout()
        .block(block)
        .ok_or_else(|| Error::config(format!("no parameter block named {block:?}")))?
        .range();
    let full = compute_features(model, dataset, logits, FeatureMode::Plain)?;
    let features = full
        .features
        .iter()
        .map(|f| {
            crate::netcore::GradientFeatures::new(
                f.example_id,
                f.logit,
                f.values[range.clone()].to_vec(),
            )
        })
        .collect();
    let restricted = FeatureSet { features, ..full };
    gram(&restricted, &restricted, KernelKind::Sgd)
}

/// Gram over every LoRA coordinate.
pub fn lora_gram(model: &LoraNetwork, dataset: &Dataset, logits: &[usize]) -> Result<GramMatrix> {
    let f = compute_features(model, dataset, logits, FeatureMode::Plain)?;
    gram(&f, &f, KernelKind::Sgd)
}

/// One row of the LoRA-vs-full kernel comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraComparison {
    pub seed: u64,
    pub k: usize,
    pub eps: f64,
    pub c: f64,
    pub max_dev: f64,
    /// `c²ε`.
    pub bound: f64,
    pub pass: bool,
    /// `None` when the full kernel is identically zero.
    pub distance: Option<KernelDistance>,
}

/// Attach LoRA to a single non-readout matrix and compare `K_LoRA` with the
/// full SGD kernel restricted to that matrix.
pub fn lora_kernel_comparison(
    base: &NetworkParams,
    config: &LoraConfig,
    dataset: &Dataset,
    logits: &[usize],
    eps: f64,
) -> Result<LoraComparison> {
    if config.targets.len() != 1 {
        return Err(Error::config(
            "kernel comparison takes exactly one target matrix",
        ));
    }
    let name = &config.targets[0];
    let target = base
        .matrix_index(name)
        .ok_or_else(|| Error::config(format!("no matrix named {name:?}")))?;
    let wrapped = lora_attach(base, config)?;
    let k_lora = lora_gram(&wrapped, dataset, logits)?;
    let k_full = block_gram(base, dataset, logits, name)?;
    let c = measure_c(base, target, dataset, logits)?;
    let max_dev = k_lora
        .values
        .as_slice()
        .iter()
        .zip(k_full.values.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let bound = c * c * eps;
    Ok(LoraComparison {
        seed: config.seed,
        k: config.rank,
        eps,
        c,
        max_dev,
        bound,
        pass: max_dev <= bound,
        distance: kernel_relative_distance(&k_lora.values, &k_full.values).ok(),
    })
}

pub const LORA_CSV_HEADER: &str = "seed,k,eps,max_dev,bound,pass";

pub fn write_lora_csv<W: Write>(mut w: W, rows: &[LoraComparison]) -> Result<()> {
    writeln!(w, "{LORA_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.seed, r.k, r.eps, r.max_dev, r.bound, r.pass
        )?;
    }
    Ok(())
}
