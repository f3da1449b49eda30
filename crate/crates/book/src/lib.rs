//! Compiles and runs the guide's code blocks as doc-tests, one module per
//! chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/parametrization.md")]
pub mod parametrization {}

#[doc = include_str!("../../../book/src/optimizers.md")]
pub mod optimizers {}

#[doc = include_str!("../../../book/src/kernels.md")]
pub mod kernels {}

#[doc = include_str!("../../../book/src/solvers.md")]
pub mod solvers {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}

#[doc = include_str!("../../../book/src/lowrank.md")]
pub mod lowrank {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
