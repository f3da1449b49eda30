use std::path::{Path, PathBuf};

use entk::data::sha256_hex;
use entk::dynamics::SweepProtocol;
use entk::kernels::KernelKind;
use entk::netcore::FtMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// One experiment: the task and training protocol, which kernels to build,
/// the sweep grid and the LoRA comparison settings. The single-run mode is
/// `protocol.task.mode`; the k-shot size is `protocol.kshot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_kernels")]
    pub kernels: Vec<KernelKind>,
    #[serde(default)]
    pub protocol: SweepProtocol,
    #[serde(default)]
    pub diagnostics: DiagnosticsSettings,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub lora: LoraSettings,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_width() -> usize {
    256
}

fn default_kernels() -> Vec<KernelKind> {
    vec![KernelKind::Sgd, KernelKind::SignGd, KernelKind::ASignGd]
}

/// Which split the linearization check is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplit {
    #[default]
    Test,
    Validation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSettings {
    #[serde(default)]
    pub probes: ProbeSplit,
    /// Also write the per-probe linearization table as CSV.
    #[serde(default)]
    pub probe_csv: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub modes: Vec<FtMode>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512],
            seeds: (0..5).collect(),
            modes: vec![FtMode::Prompted, FtMode::Standard],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSettings {
    /// Adapter rank; `None` uses `⌈20c⁴ ln N / ε²⌉` with `c` measured on the
    /// training set, which is only attainable for small, normalized layers.
    #[serde(default)]
    pub rank: Option<usize>,
    pub target: String,
    pub eps: f64,
    pub seeds: Vec<u64>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: Some(16),
            target: "W1".into(),
            eps: 0.5,
            seeds: (0..10).collect(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            width: default_width(),
            kernels: default_kernels(),
            protocol: SweepProtocol::default(),
            diagnostics: DiagnosticsSettings::default(),
            sweep: SweepGrid::default(),
            lora: LoraSettings::default(),
            out: None,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub width: Option<usize>,
    pub kshot: Option<usize>,
    pub kernel: Option<KernelKind>,
    pub ft_mode: Option<FtMode>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing(path.display().to_string()),
            _ => CliError::from(e),
        })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.width {
            self.width = w;
        }
        if let Some(k) = o.kshot {
            self.protocol.kshot = k;
        }
        if let Some(k) = o.kernel {
            self.kernels = vec![k];
        }
        if let Some(m) = o.ft_mode {
            self.protocol.task.mode = m;
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.width == 0 {
            return Err(CliError::Config("width must be positive".into()));
        }
        if self.protocol.kshot == 0 {
            return Err(CliError::Config("kshot must be at least 1".into()));
        }
        if self.kernels.is_empty() {
            return Err(CliError::Config(
                "at least one kernel kind is required".into(),
            ));
        }
        if !(self.lora.eps > 0.0 && self.lora.eps < 1.0) {
            return Err(CliError::Config(format!(
                "lora.eps must lie in (0, 1), got {}",
                self.lora.eps
            )));
        }
        self.protocol.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn mode(&self) -> FtMode {
        self.protocol.task.mode
    }

    /// Tag shared by everything downstream of one fine-tuning run.
    pub fn run_tag(&self) -> String {
        format!(
            "{}-w{}-s{}-k{}",
            mode_name(self.mode()),
            self.width,
            self.seed,
            self.protocol.kshot
        )
    }
}

pub fn mode_name(m: FtMode) -> &'static str {
    match m {
        FtMode::Prompted => "prompted",
        FtMode::Standard => "standard",
    }
}
