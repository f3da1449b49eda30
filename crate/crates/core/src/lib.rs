//! Empirical neural tangent kernels for fine-tuning.
//!
//! Builds μP-parametrized MLPs, trains them with SGD, SignGD or Adam, extracts
//! per-example gradient features, assembles SGD / SignGD / asymmetric SignGD
//! Gram matrices and solves the matching kernel regression problems. The
//! [`dynamics`] module measures how close real fine-tuning stays to its kernel
//! description, and [`lowrank`] covers LoRA and random-projection variants.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod lowrank;
pub mod model;
pub mod netcore;
pub mod optim;
pub mod solvers;

pub use error::{Error, Result};
pub use model::{Model, ParamBlock, ParamLayout};
