//! Synthetic pretrain → fine-tune task protocol.
//!
//! Inputs are standard normal. A frozen random *teacher* network labels them
//! with its `C_pt`-way argmax; that is the pretraining task. A downstream task
//! keeps only inputs whose teacher label is one of the mapped classes and asks
//! which of them wins, so it is a subcase of pretraining. Prompted fine-tuning
//! reads those classes straight off the pretrained readout; standard
//! fine-tuning replaces the readout by a fresh head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{init_network, Activation, MatrixRole, MuPConfig, NetworkParams, WeightMatrix};
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::linalg::Dense;
use crate::model::Model;
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMode {
    Prompted,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub mode: FtMode,
    pub input_dim: usize,
    pub pretrain_classes: usize,
    pub downstream_classes: usize,
    /// Downstream class `c` corresponds to pretraining class `class_mapping[c]`.
    pub class_mapping: Vec<usize>,
    pub input_seed: u64,
    pub teacher_seed: u64,
    pub teacher_width: usize,
    /// Minimum gap between the winning and runner-up teacher logits among the
    /// mapped classes for an input to enter the downstream pool.
    #[serde(default)]
    pub min_margin: f64,
}

impl TaskSpec {
    /// Binary prompted task over pretraining classes 0 and 1.
    pub fn binary(input_dim: usize, pretrain_classes: usize, seed: u64) -> Self {
        Self {
            mode: FtMode::Prompted,
            input_dim,
            pretrain_classes,
            downstream_classes: 2,
            class_mapping: vec![0, 1],
            input_seed: seed,
            teacher_seed: seed ^ 0x7EAC_4E12,
            teacher_width: 32,
            min_margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.teacher_width == 0 {
            return Err(Error::config(
                "input_dim and teacher_width must be positive",
            ));
        }
        if self.downstream_classes < 2 || self.pretrain_classes < self.downstream_classes {
            return Err(Error::config(format!(
                "need 2 ≤ downstream classes ({}) ≤ pretrain classes ({})",
                self.downstream_classes, self.pretrain_classes
            )));
        }
        if self.class_mapping.len() != self.downstream_classes {
            return Err(Error::config(
                "class_mapping must have one entry per downstream class",
            ));
        }
        let mut seen = vec![false; self.pretrain_classes];
        for &c in &self.class_mapping {
            if c >= self.pretrain_classes || std::mem::replace(&mut seen[c], true) {
                return Err(Error::config(format!(
                    "class_mapping entry {c} is out of range or repeated"
                )));
            }
        }
        if !(self.min_margin >= 0.0) {
            return Err(Error::config("min_margin must be non-negative"));
        }
        Ok(())
    }
}

/// Frozen labelling network for the synthetic tasks.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub net: NetworkParams,
}

impl Teacher {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut cfg = MuPConfig::new(
            spec.teacher_width,
            2,
            spec.input_dim,
            spec.pretrain_classes,
            Activation::Tanh,
            OptimizerKind::Sgd,
        )?;
        // standard parametrization: Θ(1) logits at any width
        cfg.readout.init_std = 1.0 / (spec.teacher_width as f64).sqrt();
        cfg.readout.multiplier = 2.0;
        Ok(Self {
            net: init_network(&cfg, spec.teacher_seed)?,
        })
    }

    pub fn pretrain_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.net.forward(x)?))
    }

    /// Downstream label of `x`, or `None` when `x` is outside the downstream pool.
    pub fn downstream_label(&self, spec: &TaskSpec, x: &[f64]) -> Result<Option<usize>> {
        let logits = self.net.forward(x)?;
        let top = argmax(&logits);
        let Some(c) = spec.class_mapping.iter().position(|&m| m == top) else {
            return Ok(None);
        };
        let runner_up = spec
            .class_mapping
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != c)
            .map(|(_, &m)| logits[m])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((logits[top] - runner_up >= spec.min_margin).then_some(c))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `count` inputs labelled with the teacher's pretraining class.
pub fn sample_pretrain(
    spec: &TaskSpec,
    teacher: &Teacher,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|i| {
            let input = standard_normal(&mut rng, spec.input_dim);
            Ok(Example {
                id: i as u64,
                label: teacher.pretrain_label(&input)?,
                input,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(examples))
}

/// Few-shot splits: exactly `kshot` examples per label in train and validation.
#[derive(Clone, Debug, PartialEq)]
pub struct KShotSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Rejection-sample the downstream pool into k-shot train/validation splits
/// plus a test set drawn from the natural downstream distribution.
pub fn gen_kshot(spec: &TaskSpec, seed: u64, kshot: usize, test_size: usize) -> Result<KShotSplit> {
    if kshot == 0 {
        return Err(Error::config("kshot must be at least 1"));
    }
    let teacher = Teacher::new(spec)?;
    let c = spec.downstream_classes;
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.input_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut train_counts = vec![0; c];
    let mut val_counts = vec![0; c];
    let needed = 2 * kshot * c + test_size;
    let budget = 2000 * needed.max(1);
    let mut next_id = 0u64;
    for _ in 0..budget {
        if train.len() == kshot * c && val.len() == kshot * c && test.len() == test_size {
            break;
        }
        let input = standard_normal(&mut rng, spec.input_dim);
        let Some(label) = teacher.downstream_label(spec, &input)? else {
            continue;
        };
        let ex = Example {
            id: next_id,
            label,
            input,
        };
        next_id += 1;
        if train_counts[label] < kshot {
            train_counts[label] += 1;
            train.push(ex);
        } else if val_counts[label] < kshot {
            val_counts[label] += 1;
            val.push(ex);
        } else if test.len() < test_size {
            test.push(ex);
        }
    }
    if train.len() < kshot * c || val.len() < kshot * c || test.len() < test_size {
        return Err(Error::Input(format!(
            "downstream pool too small: got train {:?}, validation {:?}, test {}/{test_size} after {budget} draws",
            train_counts,
            val_counts,
            test.len()
        )));
    }
    Ok(KShotSplit {
        train: Dataset::new(train),
        validation: Dataset::new(val),
        test: Dataset::new(test),
    })
}

/// Prompted readout: keep only the readout columns of the mapped classes.
/// No parameters are created.
pub fn prompted_network(
    pretrained: &NetworkParams,
    class_mapping: &[usize],
) -> Result<NetworkParams> {
    let v = pretrained.readout();
    let (n, c_pt) = (v.values.rows(), v.values.cols());
    if let Some(&bad) = class_mapping.iter().find(|&&m| m >= c_pt) {
        return Err(Error::config(format!(
            "class {bad} not present in a {c_pt}-way readout"
        )));
    }
    let mut cols = Dense::zeros(n, class_mapping.len());
    for r in 0..n {
        for (j, &m) in class_mapping.iter().enumerate() {
            cols.set(r, j, v.values.get(r, m));
        }
    }
    let mut out = pretrained.clone();
    out.readout_mut().values = cols;
    Ok(out)
}

/// Replace the readout with `head` (an `n × C` matrix).
pub fn attach_head(pretrained: &NetworkParams, head: Dense) -> Result<NetworkParams> {
    if head.rows() != pretrained.width() {
        return Err(Error::shape(format!(
            "head has {} rows, representation has width {}",
            head.rows(),
            pretrained.width()
        )));
    }
    let mut out = pretrained.clone();
    let old = out.readout().clone();
    *out.readout_mut() = WeightMatrix {
        role: MatrixRole::Readout,
        values: head,
        ..old
    };
    Ok(out)
}

/// Fresh `n × C` head with μP readout scale `1/n`.
pub fn random_head(width: usize, classes: usize, seed: u64) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dense::gaussian(width, classes, 1.0 / width as f64, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec::binary(8, 4, 3)
    }

    #[test]
    fn kshot_counts_are_exact() {
        let split = gen_kshot(&spec(), 1, 16, 40).unwrap();
        assert_eq!(split.train.len(), 32);
        assert_eq!(split.train.label_counts(2), vec![16, 16]);
        assert_eq!(split.validation.label_counts(2), vec![16, 16]);
        assert_eq!(split.test.len(), 40);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_kshot(&spec(), 9, 4, 10).unwrap();
        let b = gen_kshot(&spec(), 9, 4, 10).unwrap();
        assert_eq!(a.train.content_hash(), b.train.content_hash());
        assert_eq!(a.test.content_hash(), b.test.content_hash());
        let c = gen_kshot(&spec(), 10, 4, 10).unwrap();
        assert_ne!(a.train.content_hash(), c.train.content_hash());
    }

    #[test]
    fn impossible_margin_errors() {
        let mut s = spec();
        s.min_margin = 1e9;
        assert!(matches!(gen_kshot(&s, 0, 1, 0), Err(Error::Input(_))));
    }

    #[test]
    fn downstream_labels_agree_with_teacher() {
        let s = spec();
        let teacher = Teacher::new(&s).unwrap();
        let split = gen_kshot(&s, 2, 8, 0).unwrap();
        for e in &split.train.examples {
            assert_eq!(
                teacher.pretrain_label(&e.input).unwrap(),
                s.class_mapping[e.label]
            );
        }
    }

    #[test]
    fn prompted_readout_is_a_column_selection() {
        let cfg = MuPConfig::new(6, 2, 8, 4, Activation::Tanh, OptimizerKind::Sgd).unwrap();
        let net = init_network(&cfg, 0).unwrap();
        let p = prompted_network(&net, &[2, 0]).unwrap();
        assert_eq!(p.num_parameters(), net.num_parameters() - 2 * 6);
        let x = [0.5; 8];
        let full = net.forward(&x).unwrap();
        let sub = p.forward(&x).unwrap();
        assert_eq!(sub, vec![full[2], full[0]]);
    }

    #[test]
    fn invalid_mapping_is_rejected() {
        let mut s = spec();
        s.class_mapping = vec![0, 0];
        assert!(s.validate().is_err());
        s.class_mapping = vec![0, 9];
        assert!(s.validate().is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
