use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, MuPConfig};
use crate::error::{Error, Result};
use crate::linalg::Dense;
use crate::model::{check_input, Model, ParamLayout};
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    Input,
    Hidden(usize),
    Readout,
}

impl MatrixRole {
    pub fn name(&self) -> String {
        match self {
            MatrixRole::Input => "U".to_owned(),
            MatrixRole::Hidden(j) => format!("W{j}"),
            MatrixRole::Readout => "V".to_owned(),
        }
    }
}

/// One weight matrix. The forward pass uses `multiplier · values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub role: MatrixRole,
    pub values: Dense,
    pub multiplier: f64,
    pub init_std: f64,
    pub lr_scale: f64,
}

/// An MLP `f(ξ) = γ_V·Vᵀ φ(γ_W·W^{L−1} ⋯ φ(γ_U·U ξ))`.
///
/// Shapes: `U` is `n × d_in`, every `W` is `n × n`, `V` is `n × d_out`.
/// Matrices are stored in forward order `U, W1, …, W(L−1), V`, which is also
/// the flattening order of gradient features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub activation: Activation,
    pub augment_input: bool,
    pub matrices: Vec<WeightMatrix>,
}

pub(crate) struct ForwardCache {
    /// Augmented input followed by every hidden activation.
    pub(crate) activations: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pub(crate) preacts: Vec<Vec<f64>>,
    pub(crate) logits: Vec<f64>,
}

/// Sample a network with i.i.d. `N(0, σ_M²)` entries. Deterministic in `seed`.
pub fn init_network(config: &MuPConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.width;
    let mut matrices = Vec::with_capacity(config.depth + 1);
    let mut push = |role, rows, cols, s: super::MatrixScale, rng: &mut ChaCha8Rng| {
        matrices.push(WeightMatrix {
            role,
            values: Dense::gaussian(rows, cols, s.init_std, rng),
            multiplier: s.multiplier,
            init_std: s.init_std,
            lr_scale: s.lr_scale,
        });
    };
    push(
        MatrixRole::Input,
        n,
        config.effective_input_dim(),
        config.input,
        &mut rng,
    );
    for j in 1..config.depth {
        push(MatrixRole::Hidden(j), n, n, config.hidden, &mut rng);
    }
    push(
        MatrixRole::Readout,
        n,
        config.output_dim,
        config.readout,
        &mut rng,
    );
    let net = NetworkParams {
        activation: config.activation,
        augment_input: config.augment_input,
        matrices,
    };
    net.validate()?;
    Ok(net)
}

impl NetworkParams {
    /// Check that the matrix chain is well formed.
    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        let m = &self.matrices;
        if m.len() < 2 {
            return Err(Error::shape(
                "network needs at least an input and a readout matrix",
            ));
        }
        if m[0].role != MatrixRole::Input || m[m.len() - 1].role != MatrixRole::Readout {
            return Err(Error::shape("matrix list must start with U and end with V"));
        }
        let n = m[0].values.rows();
        for (j, w) in m[1..m.len() - 1].iter().enumerate() {
            if w.role != MatrixRole::Hidden(j + 1) || w.values.rows() != n || w.values.cols() != n {
                return Err(Error::shape(format!(
                    "hidden matrix {} must be {n}×{n}",
                    j + 1
                )));
            }
        }
        if m[m.len() - 1].values.rows() != n {
            return Err(Error::shape(format!("readout must have {n} rows")));
        }
        if self.augment_input && m[0].values.cols() < 2 {
            return Err(Error::shape(
                "augmented input needs at least one real coordinate",
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.matrices[0].values.rows()
    }

    pub fn depth(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn readout(&self) -> &WeightMatrix {
        self.matrices.last().expect("validated network")
    }

    pub fn readout_mut(&mut self) -> &mut WeightMatrix {
        self.matrices.last_mut().expect("validated network")
    }

    pub fn matrix_index(&self, name: &str) -> Option<usize> {
        self.matrices.iter().position(|m| m.role.name() == name)
    }

    /// Set every learning-rate scale except those in `trainable` to zero.
    pub fn freeze_except(&mut self, trainable: &[&str]) {
        for m in &mut self.matrices {
            if !trainable.contains(&m.role.name().as_str()) {
                m.lr_scale = 0.0;
            }
        }
    }

    fn augmented(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        if self.augment_input {
            x.push(1.0);
        }
        x
    }

    pub(crate) fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        check_input(self, input)?;
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth + 1);
        let mut preacts = Vec::with_capacity(depth);
        activations.push(self.augmented(input));
        for (layer, w) in self.matrices[..depth].iter().enumerate() {
            let prev = activations.last().expect("non-empty");
            let mut z = w.values.matvec(prev);
            z.iter_mut().for_each(|v| *v *= w.multiplier);
            let h: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer + 1,
                    what: "hidden activation".into(),
                });
            }
            preacts.push(z);
            activations.push(h);
        }
        let v = self.readout();
        let mut logits = v.values.matvec_t(activations.last().expect("non-empty"));
        logits.iter_mut().for_each(|l| *l *= v.multiplier);
        if !logits.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite {
                layer: depth + 1,
                what: "logits".into(),
            });
        }
        Ok(ForwardCache {
            activations,
            preacts,
            logits,
        })
    }

    /// Per-matrix gradients of `⟨cotangent, f⟩` given a forward cache.
    pub(crate) fn backward_blocks(
        &self,
        cache: &ForwardCache,
        cotangent: &[f64],
    ) -> Result<Vec<Dense>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "cotangent has length {}, network has {} outputs",
                cotangent.len(),
                self.output_dim()
            )));
        }
        let depth = self.depth();
        let mut grads = vec![Dense::zeros(0, 0); depth + 1];
        let v = self.readout();
        let h_last = &cache.activations[depth];
        grads[depth] = Dense::outer(h_last, cotangent, v.multiplier);
        let mut dh = v.values.matvec(cotangent);
        dh.iter_mut().for_each(|x| *x *= v.multiplier);
        for layer in (0..depth).rev() {
            let dz: Vec<f64> = dh
                .iter()
                .zip(&cache.preacts[layer])
                .map(|(&g, &z)| g * self.activation.derivative(z))
                .collect();
            let w = &self.matrices[layer];
            grads[layer] = Dense::outer(&dz, &cache.activations[layer], w.multiplier);
            if !grads[layer].is_finite() {
                return Err(Error::NonFinite {
                    layer: layer + 1,
                    what: "gradient".into(),
                });
            }
            if layer > 0 {
                dh = w.values.matvec_t(&dz);
                dh.iter_mut().for_each(|x| *x *= w.multiplier);
            }
        }
        Ok(grads)
    }

    /// `out += scale · ∇⟨cotangent, f⟩`, written straight into the flat layout.
    pub(crate) fn backward_into(
        &self,
        cache: &ForwardCache,
        cotangent: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "cotangent has length {}, network has {} outputs",
                cotangent.len(),
                self.output_dim()
            )));
        }
        let depth = self.depth();
        let mut offsets = Vec::with_capacity(depth + 1);
        let mut o = 0;
        for m in &self.matrices {
            offsets.push(o);
            o += m.values.len();
        }
        let v = self.readout();
        let h_last = &cache.activations[depth];
        add_outer(
            &mut out[offsets[depth]..],
            h_last,
            cotangent,
            scale * v.multiplier,
        );
        let mut dh = v.values.matvec(cotangent);
        dh.iter_mut().for_each(|x| *x *= v.multiplier);
        for layer in (0..depth).rev() {
            let dz: Vec<f64> = dh
                .iter()
                .zip(&cache.preacts[layer])
                .map(|(&g, &z)| g * self.activation.derivative(z))
                .collect();
            if !dz.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer + 1,
                    what: "gradient".into(),
                });
            }
            let w = &self.matrices[layer];
            add_outer(
                &mut out[offsets[layer]..],
                &dz,
                &cache.activations[layer],
                scale * w.multiplier,
            );
            if layer > 0 {
                dh = w.values.matvec_t(&dz);
                dh.iter_mut().for_each(|x| *x *= w.multiplier);
            }
        }
        Ok(())
    }

    /// Per-matrix gradient of `⟨cotangent, f(input)⟩`.
    pub fn gradient_blocks(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<Dense>> {
        let cache = self.forward_cached(input)?;
        self.backward_blocks(&cache, cotangent)
    }

    /// The vector matrix `index` multiplies: the augmented input for `U`, the
    /// previous hidden activation otherwise.
    pub fn layer_input(&self, input: &[f64], index: usize) -> Result<Vec<f64>> {
        if index >= self.matrices.len() {
            return Err(Error::input(format!("matrix index {index} out of range")));
        }
        let mut cache = self.forward_cached(input)?;
        Ok(cache.activations.swap_remove(index))
    }

    /// Final hidden representation `h_L(ξ)`.
    pub fn representation(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut cache = self.forward_cached(input)?;
        Ok(cache.activations.pop().expect("non-empty"))
    }

    /// Lemma-style multiplier reparametrization: for each selected matrix
    /// `γ_M ← γ_M·γ`, `M ← M/γ`, `σ_M ← σ_M/γ` and the learning-rate scale is
    /// divided by `γ²` (SGD) or `γ` (SignGD, Adam). The function is unchanged,
    /// and so is every subsequent training trajectory.
    pub fn reparametrize(
        &self,
        family: OptimizerKind,
        gamma: f64,
        matrices: Option<&[usize]>,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!(
                "reparametrization needs gamma > 0, got {gamma}"
            )));
        }
        let mut out = self.clone();
        let lr_div = match family {
            OptimizerKind::Sgd => gamma * gamma,
            OptimizerKind::SignGd | OptimizerKind::Adam => gamma,
        };
        for (i, m) in out.matrices.iter_mut().enumerate() {
            if matrices.is_some_and(|sel| !sel.contains(&i)) {
                continue;
            }
            m.multiplier *= gamma;
            m.values.scale_in_place(1.0 / gamma);
            m.init_std /= gamma;
            m.lr_scale /= lr_div;
        }
        Ok(out)
    }
}

impl Model for NetworkParams {
    fn input_dim(&self) -> usize {
        self.matrices[0].values.cols() - usize::from(self.augment_input)
    }

    fn output_dim(&self) -> usize {
        self.readout().values.cols()
    }

    fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::default();
        for m in &self.matrices {
            layout.push(m.role.name(), m.values.rows(), m.values.cols(), m.lr_scale);
        }
        layout
    }

    fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.logits)
    }

    fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let blocks = self.gradient_blocks(input, cotangent)?;
        Ok(flatten(blocks))
    }

    fn jacobian_rows(&self, input: &[f64], logits: &[usize]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cached(input)?;
        let d = self.output_dim();
        logits
            .iter()
            .map(|&c| {
                if c >= d {
                    return Err(Error::input(format!(
                        "logit index {c} out of range for {d} outputs"
                    )));
                }
                let mut e = vec![0.0; d];
                e[c] = 1.0;
                Ok(flatten(self.backward_blocks(&cache, &e)?))
            })
            .collect()
    }

    fn parameters(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.num_parameters());
        for m in &self.matrices {
            theta.extend_from_slice(m.values.as_slice());
        }
        theta
    }

    fn set_parameters(&mut self, theta: &[f64]) -> Result<()> {
        let total: usize = self.matrices.iter().map(|m| m.values.len()).sum();
        if theta.len() != total {
            return Err(Error::shape(format!(
                "expected {total} parameters, got {}",
                theta.len()
            )));
        }
        let mut offset = 0;
        for m in &mut self.matrices {
            let len = m.values.len();
            m.values
                .as_mut_slice()
                .copy_from_slice(&theta[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn accumulate_vjp(
        &self,
        input: &[f64],
        cotangent: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if out.len() != self.num_parameters() {
            return Err(Error::shape(format!(
                "accumulator has {} coordinates, model has {}",
                out.len(),
                self.num_parameters()
            )));
        }
        let cache = self.forward_cached(input)?;
        self.backward_into(&cache, cotangent, scale, out)
    }

    fn add_to_parameters(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.num_parameters() {
            return Err(Error::shape(format!(
                "expected {} coordinates, got {}",
                self.num_parameters(),
                delta.len()
            )));
        }
        let mut offset = 0;
        for m in &mut self.matrices {
            let len = m.values.len();
            m.values
                .as_mut_slice()
                .iter_mut()
                .zip(&delta[offset..offset + len])
                .for_each(|(v, d)| *v += d);
            offset += len;
        }
        Ok(())
    }

    fn nudge(&mut self, index: usize, delta: f64) -> Result<()> {
        let mut offset = index;
        for m in &mut self.matrices {
            if offset < m.values.len() {
                m.values.as_mut_slice()[offset] += delta;
                return Ok(());
            }
            offset -= m.values.len();
        }
        Err(Error::input(format!(
            "parameter index {index} out of range"
        )))
    }

    fn num_parameters(&self) -> usize {
        self.matrices.iter().map(|m| m.values.len()).sum()
    }
}

/// `out[i·|v| + j] += s · u_i · v_j`.
fn add_outer(out: &mut [f64], u: &[f64], v: &[f64], s: f64) {
    for (i, &ui) in u.iter().enumerate() {
        let a = s * ui;
        for (o, &vj) in out[i * v.len()..(i + 1) * v.len()].iter_mut().zip(v) {
            *o += a * vj;
        }
    }
}

pub(crate) fn flatten(blocks: Vec<Dense>) -> Vec<f64> {
    let total = blocks.iter().map(Dense::len).sum();
    let mut out = Vec::with_capacity(total);
    for b in blocks {
        out.extend_from_slice(b.as_slice());
    }
    out
}
