//! Diagnostics for kernel behavior: linearization, fixed features, the
//! one-step kernel law, the exact three-layer linear identity and the
//! width-sweep harness.

mod behavior;
mod linear3;
mod step;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub use behavior::{
    chi_stats, diagnose, fixed_features_report, linearization_report, ChiStats, DiagnosticsReport,
    FixedFeaturesReport, LinearizationReport, MatrixDrift, ProbeLinearization, Verdicts,
};
pub use linear3::{linear3_decompose, Linear3Instance, Linear3Terms};
pub use step::{kernel_step_check, StepCheck};
pub use sweep::{
    chi_width_test, decreasing_trend, finetune_start, non_decreasing, pretrain_run,
    pretrain_student, spearman, strictly_decreasing, width_sweep, write_sweep_csv, HeadInit,
    SweepCell, SweepProtocol, SweepVerdict, WidthSummary, WidthSweepResult, SWEEP_CSV_HEADER,
};

/// Verdict thresholds; defaults are the kernel-behavior criteria.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Minimum share of the fine-tuning improvement the linearized model must recover.
    #[serde(default = "default_lin")]
    pub min_linearization_ratio: f64,
    /// Maximum mean element-wise relative kernel drift.
    #[serde(default = "default_drift")]
    pub max_kernel_drift: f64,
    /// Minimum eNTK accuracy as a fraction of fine-tuning accuracy.
    #[serde(default = "default_entk")]
    pub min_entk_fraction: f64,
}

fn default_lin() -> f64 {
    0.5
}
fn default_drift() -> f64 {
    2.0
}
fn default_entk() -> f64 {
    0.9
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_linearization_ratio: default_lin(),
            max_kernel_drift: default_drift(),
            min_entk_fraction: default_entk(),
        }
    }
}

/// Additive guard in the function-space relative error denominator.
pub const LINEARIZATION_DELTA: f64 = 1e-12;

/// Reporting range for the accuracy-based linearization ratio.
pub const RATIO_CLAMP: (f64, f64) = (-1.0, 2.0);

pub(crate) fn same_architecture(a: &dyn Model, b: &dyn Model) -> Result<()> {
    let (la, lb) = (a.layout(), b.layout());
    let shapes = |l: &crate::model::ParamLayout| {
        l.blocks
            .iter()
            .map(|b| (b.name.clone(), b.rows, b.cols))
            .collect::<Vec<_>>()
    };
    if a.input_dim() != b.input_dim()
        || a.output_dim() != b.output_dim()
        || shapes(&la) != shapes(&lb)
    {
        return Err(Error::input(
            "pre and post models have different architectures",
        ));
    }
    Ok(())
}
