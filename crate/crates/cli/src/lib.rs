//! Experiment orchestration over an on-disk artifact store: task generation,
//! pretraining and fine-tuning, Gram construction, kernel solves,
//! diagnostics, width sweeps, LoRA comparisons and summary reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use entk::kernels::KernelKind;
use entk::netcore::FtMode;

use crate::commands::Ctx;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::store::ArtifactStore;

pub const DEFAULT_OUT: &str = "entk-out";

#[derive(Debug, Parser)]
#[command(
    name = "entk",
    version,
    about = "Empirical NTK experiments on synthetic few-shot tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON, versioned; unknown keys are rejected).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed: initialization, and data too when the protocol has no data seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact store directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub kshot: Option<usize>,
    /// Restrict gram/solve to one kernel.
    #[arg(long, global = true, value_enum)]
    pub kernel: Option<KernelArg>,
    #[arg(long = "ft-mode", global = true, value_enum)]
    pub ft_mode: Option<ModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KernelArg {
    Sgd,
    Signgd,
    Asigngd,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Sgd => KernelKind::Sgd,
            KernelArg::Signgd => KernelKind::SignGd,
            KernelArg::Asigngd => KernelKind::ASignGd,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Prompted,
    Standard,
}

impl From<ModeArg> for FtMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Prompted => FtMode::Prompted,
            ModeArg::Standard => FtMode::Standard,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the k-shot train/validation splits and the test set.
    Gen,
    /// Pretrain a student on the teacher task.
    Pretrain,
    /// Fine-tune the pretrained student on the k-shot training split.
    Finetune,
    /// Gradient-feature norms of the fine-tuning start network.
    Features,
    /// Build train, validation and test Grams for each configured kernel.
    Gram,
    /// Grid-search kernel solvers and evaluate on the test set.
    Solve,
    /// Linearization, fixed-features and χ diagnostics for a fine-tuning run.
    Diagnose,
    /// Width sweep over the configured widths, seeds and modes.
    Sweep,
    /// Compare LoRA and full eNTKs over several adapter seeds.
    Lora,
    /// Summarize recorded results with their artifact hashes.
    Report,
    /// Print the effective config as JSON.
    ShowConfig,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Features => "features",
            Command::Gram => "gram",
            Command::Solve => "solve",
            Command::Diagnose => "diagnose",
            Command::Sweep => "sweep",
            Command::Lora => "lora",
            Command::Report => "report",
            Command::ShowConfig => "show-config",
        }
    }
}

/// Caps rayon's pool at `ENTK_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("ENTK_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        CliError::Config(format!(
            "ENTK_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    if n == 0 {
        return Err(CliError::Config("ENTK_THREADS must be at least 1".into()));
    }
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let g = &cli.global;
    let base = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        seed: g.seed,
        width: g.width,
        kshot: g.kshot,
        kernel: g.kernel.map(Into::into),
        ft_mode: g.ft_mode.map(Into::into),
        out: g.out.clone(),
    };
    let config = base.apply(&overrides);
    config.validate()?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let root = config
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let store = match cli.command {
        Command::Report => ArtifactStore::open(&root),
        _ => ArtifactStore::create(&root)?,
    };
    let ctx = Ctx {
        config_hash: config.hash(),
        config,
        store,
    };
    match cli.command {
        Command::Gen => commands::gen(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::Features => commands::features(&ctx),
        Command::Gram => commands::gram_cmd(&ctx),
        Command::Solve => commands::solve(&ctx),
        Command::Diagnose => commands::diagnose_cmd(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Lora => commands::lora(&ctx),
        Command::Report => commands::report(&ctx),
        Command::ShowConfig => unreachable!("handled above"),
    }
}
