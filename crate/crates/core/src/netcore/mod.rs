//! μP-parametrized MLPs with exact per-example gradients, and the synthetic
//! pretrain → fine-tune protocol they are studied under.

mod activation;
mod config;
mod gradient;
mod network;
mod probe;
pub mod task;
pub mod weights;

pub use activation::Activation;
pub use config::{MatrixScale, MuPConfig};
pub use gradient::{
    finite_diff_gradient, per_example_gradient, relative_l2_error, GradientFeatures,
};
pub use network::{init_network, MatrixRole, NetworkParams, WeightMatrix};
pub use probe::{linear_probe, probe_accuracy, probe_features, ProbeLoss};
pub use task::{argmax, FtMode, KShotSplit, TaskSpec, Teacher};

#[cfg(test)]
pub(crate) use network::tests_support;
pub(crate) use probe::softmax;
