use std::io::Write;

use serde::{Deserialize, Serialize};

use super::behavior::{chi_stats, fixed_features_report, linearization_report, ChiStats};
use super::Thresholds;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{compute_features, cross_gram, gram, FeatureMode, KernelKind};
use crate::model::Model;
use crate::netcore::task::{
    attach_head, gen_kshot, prompted_network, random_head, sample_pretrain, KShotSplit,
};
use crate::netcore::{
    argmax, init_network, linear_probe, Activation, FtMode, MuPConfig, NetworkParams, ProbeLoss,
    TaskSpec, Teacher,
};
use crate::optim::{train, OptimizerConfig, OptimizerKind, TrainTrace};
use crate::solvers::{grid_search, predict, SolveConfig, Split};

/// How the standard-mode head is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Fresh `N(0, 1/n²)` head.
    #[default]
    Random,
    /// Ridge linear probe on the training representations.
    Probe,
}

/// Everything a width-sweep cell does except its width and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepProtocol {
    pub task: TaskSpec,
    pub depth: usize,
    pub activation: Activation,
    pub pretrain_size: usize,
    /// Seeds the pretraining set, the batch order and the downstream split.
    /// `None` draws them from the cell seed too, so seeds vary data as well as
    /// initialization.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub pretrain: OptimizerConfig,
    pub kshot: usize,
    pub test_size: usize,
    pub finetune: OptimizerConfig,
    #[serde(default)]
    pub standard_head: HeadInit,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl SweepProtocol {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.solve.validate()?;
        if self.depth == 0 || self.pretrain_size == 0 || self.test_size == 0 {
            return Err(Error::config(
                "depth, pretrain_size and test_size must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: FtMode,
    pub width: usize,
    pub seed: u64,
    pub chi_mean: f64,
    pub chi_max: f64,
    pub lin_ratio: f64,
    pub lin_ratio_raw: Option<f64>,
    pub acc_pt: f64,
    pub acc_lin: f64,
    pub drift_feat: f64,
    pub drift_kernel: f64,
    pub entk_acc: f64,
    pub ft_acc: f64,
    /// Set when any stage failed; the numeric fields are then NaN.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepCell {
    fn failed(mode: FtMode, width: usize, seed: u64, err: String) -> Self {
        let nan = f64::NAN;
        Self {
            mode,
            width,
            seed,
            chi_mean: nan,
            chi_max: nan,
            lin_ratio: nan,
            lin_ratio_raw: None,
            acc_pt: nan,
            acc_lin: nan,
            drift_feat: nan,
            drift_kernel: nan,
            entk_acc: nan,
            ft_acc: nan,
            error: Some(err),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub mode: FtMode,
    pub width: usize,
    pub cells: usize,
    pub chi_max: f64,
    pub chi_mean: f64,
    pub lin_ratio: f64,
    pub drift_feat: f64,
    pub drift_kernel: f64,
    pub entk_acc: f64,
    pub ft_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthSweepResult {
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
    /// Medians over successful seeds, one entry per (mode, width).
    pub summaries: Vec<WidthSummary>,
}

impl WidthSweepResult {
    pub fn summaries_for(&self, mode: FtMode) -> Vec<&WidthSummary> {
        self.summaries.iter().filter(|s| s.mode == mode).collect()
    }

    /// Spearman correlation of a median statistic with width; `None` for a
    /// single width.
    pub fn trend(&self, mode: FtMode, stat: impl Fn(&WidthSummary) -> f64) -> Option<f64> {
        let s = self.summaries_for(mode);
        if s.len() < 2 {
            return None;
        }
        let w: Vec<f64> = s.iter().map(|x| x.width as f64).collect();
        let v: Vec<f64> = s.iter().map(|x| stat(x)).collect();
        Some(spearman(&w, &v))
    }
}

/// Each value strictly below its predecessor.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.len() >= 2 && v.windows(2).all(|w| w[1] < w[0])
}

/// Each value at least its predecessor.
pub fn non_decreasing(v: &[f64]) -> bool {
    v.len() >= 2 && v.windows(2).all(|w| w[1] >= w[0])
}

/// Downward trend: the last value is below the first and the rank
/// correlation with position is at most `−0.8` (one adjacent swap in four).
pub fn decreasing_trend(v: &[f64]) -> bool {
    if v.len() < 2 || !(v[v.len() - 1] < v[0]) {
        return false;
    }
    let pos: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
    spearman(&pos, v) <= -0.8
}

/// Pass/fail of the width-scaling claims on a two-mode sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepVerdict {
    pub chi_max_strictly_decreasing: bool,
    pub drift_decreasing: bool,
    pub lin_ratio_non_decreasing: bool,
    pub lin_ratio_at_largest: f64,
    pub entk_fraction_at_largest: f64,
    /// Standard mode: medians not strictly decreasing and the last stays
    /// within 10% of the first.
    pub standard_chi_flat: bool,
    pub pass: bool,
}

impl WidthSweepResult {
    fn column(&self, mode: FtMode, stat: fn(&WidthSummary) -> f64) -> Vec<f64> {
        self.summaries_for(mode).into_iter().map(stat).collect()
    }

    /// Prompted-mode trends plus the standard-mode control, judged on medians.
    pub fn verdict(&self, thresholds: &Thresholds) -> Result<SweepVerdict> {
        let chi = self.column(FtMode::Prompted, |s| s.chi_max);
        let std_chi = self.column(FtMode::Standard, |s| s.chi_max);
        if chi.len() < 2 || std_chi.len() < 2 {
            return Err(Error::config(
                "verdict needs prompted and standard summaries over at least two widths",
            ));
        }
        let drift = self.column(FtMode::Prompted, |s| s.drift_feat);
        let lin = self.column(FtMode::Prompted, |s| s.lin_ratio);
        let last = *self
            .summaries_for(FtMode::Prompted)
            .last()
            .expect("non-empty");
        let entk_fraction = last.entk_acc / last.ft_acc;
        let standard_chi_flat =
            !strictly_decreasing(&std_chi) && std_chi[std_chi.len() - 1] >= 0.9 * std_chi[0];
        let mut v = SweepVerdict {
            chi_max_strictly_decreasing: strictly_decreasing(&chi),
            drift_decreasing: decreasing_trend(&drift),
            lin_ratio_non_decreasing: non_decreasing(&lin),
            lin_ratio_at_largest: last.lin_ratio,
            entk_fraction_at_largest: entk_fraction,
            standard_chi_flat,
            pass: false,
        };
        v.pass = v.chi_max_strictly_decreasing
            && v.drift_decreasing
            && v.lin_ratio_non_decreasing
            && v.lin_ratio_at_largest >= thresholds.min_linearization_ratio
            && v.entk_fraction_at_largest >= thresholds.min_entk_fraction
            && v.standard_chi_flat;
        Ok(v)
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation with average ranks for ties; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn with_seed(cfg: &OptimizerConfig, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        seed,
        ..cfg.clone()
    }
}

/// Pretrains a μP student of the given width on the teacher task. Returns the
/// network and whether pretraining diverged.
pub fn pretrain_student(
    protocol: &SweepProtocol,
    width: usize,
    seed: u64,
) -> Result<(NetworkParams, bool)> {
    let (_, trace) = pretrain_run(protocol, width, seed)?;
    Ok((trace.final_params, trace.diverged))
}

/// Like [`pretrain_student`] but also returns the pretraining set and the
/// full training trace.
pub fn pretrain_run(
    protocol: &SweepProtocol,
    width: usize,
    seed: u64,
) -> Result<(Dataset, TrainTrace<NetworkParams>)> {
    let task = &protocol.task;
    let cfg = MuPConfig::new(
        width,
        protocol.depth,
        task.input_dim,
        task.pretrain_classes,
        protocol.activation,
        protocol.pretrain.kind,
    )?;
    let net = init_network(&cfg, seed)?;
    let teacher = Teacher::new(task)?;
    let data_seed = protocol.data_seed.unwrap_or(seed);
    let data = sample_pretrain(
        task,
        &teacher,
        protocol.pretrain_size,
        data_seed.wrapping_add(0x5EED),
    )?;
    let trace = train(&net, &data, &with_seed(&protocol.pretrain, data_seed), &[])?;
    Ok((data, trace))
}

/// The network fine-tuning starts from: the prompted readout, or the
/// pretrained body with a fresh or probed head, with learning-rate scales of
/// the fine-tuning optimizer family.
pub fn finetune_start(
    protocol: &SweepProtocol,
    pretrained: &NetworkParams,
    split: &KShotSplit,
    mode: FtMode,
    seed: u64,
) -> Result<NetworkParams> {
    let c = protocol.task.downstream_classes;
    let mut net = match mode {
        FtMode::Prompted => prompted_network(pretrained, &protocol.task.class_mapping)?,
        FtMode::Standard => {
            let head = match protocol.standard_head {
                HeadInit::Random => random_head(pretrained.width(), c, seed ^ 0x4EAD),
                HeadInit::Probe => {
                    linear_probe(pretrained, &split.train, c, 1e-3, ProbeLoss::Ridge)?
                }
            };
            attach_head(pretrained, head)?
        }
    };
    // fine-tuning learning-rate scales follow the fine-tuning optimizer family
    let family = MuPConfig::new(
        net.width(),
        protocol.depth,
        protocol.task.input_dim,
        c,
        protocol.activation,
        protocol.finetune.kind,
    )?;
    let scales = std::iter::once(family.input.lr_scale)
        .chain(std::iter::repeat_n(
            family.hidden.lr_scale,
            protocol.depth - 1,
        ))
        .chain(std::iter::once(family.readout.lr_scale));
    for (m, s) in net.matrices.iter_mut().zip(scales) {
        m.lr_scale = s;
    }
    Ok(net)
}

fn accuracy(model: &dyn Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for ex in &data.examples {
        if argmax(&model.forward(&ex.input)?) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn logits_of(model: &dyn Model, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.examples
        .iter()
        .map(|e| model.forward(&e.input))
        .collect()
}

fn run_cell(
    protocol: &SweepProtocol,
    pretrained: &NetworkParams,
    split: &KShotSplit,
    mode: FtMode,
    width: usize,
    seed: u64,
) -> Result<SweepCell> {
    let start = finetune_start(protocol, pretrained, split, mode, seed)?;
    let chi = chi_stats(&start, &split.train, protocol.finetune.loss)?;
    let ft = train(
        &start,
        &split.train,
        &with_seed(&protocol.finetune, protocol.data_seed.unwrap_or(seed)),
        &[],
    )?;
    if ft.diverged {
        return Err(Error::Numeric("fine-tuning diverged".into()));
    }
    let post = ft.final_params;
    let lin = linearization_report(&start, &post, &split.test)?;
    let ff = fixed_features_report(&start, &post, &split.train)?;

    let logits: Vec<usize> = (0..protocol.task.downstream_classes).collect();
    let feats = compute_features(&start, &split.train, &logits, FeatureMode::Plain)?;
    let k_train = gram(&feats, &feats, KernelKind::Sgd)?;
    let k_val = cross_gram(&start, &split.validation, &feats, KernelKind::Sgd)?;
    let k_test = cross_gram(&start, &split.test, &feats, KernelKind::Sgd)?;
    drop(feats);
    let (f0_train, f0_val, f0_test) = (
        logits_of(&start, &split.train)?,
        logits_of(&start, &split.validation)?,
        logits_of(&start, &split.test)?,
    );
    let (y_train, y_val, y_test) = (
        split.train.labels(),
        split.validation.labels(),
        split.test.labels(),
    );
    let fit = grid_search(
        Split {
            gram: &k_train,
            labels: &y_train,
            f0: Some(&f0_train),
        },
        Split {
            gram: &k_val,
            labels: &y_val,
            f0: Some(&f0_val),
        },
        None,
        &protocol.solve,
    )?;
    let pred = predict(&k_test, &fit, Some(&f0_test), None)?;
    let entk_acc = pred
        .decisions
        .iter()
        .zip(&y_test)
        .filter(|(p, y)| p == y)
        .count() as f64
        / y_test.len() as f64;

    Ok(SweepCell {
        mode,
        width,
        seed,
        chi_mean: chi.mean,
        chi_max: chi.max,
        lin_ratio: lin.ratio,
        lin_ratio_raw: lin.ratio_raw,
        acc_pt: lin.acc_pt,
        acc_lin: lin.acc_lin,
        drift_feat: ff.max_drift,
        drift_kernel: ff.kernel.mean_elementwise_relative,
        entk_acc,
        ft_acc: accuracy(&post, &split.test)?,
        error: None,
    })
}

/// Pretrain → fine-tune → diagnostics → eNTK solve for every
/// `(width, seed)` and every requested mode. Pretraining is shared across
/// modes; failed cells are recorded and skipped in the medians.
pub fn width_sweep(
    protocol: &SweepProtocol,
    widths: &[usize],
    seeds: &[u64],
    modes: &[FtMode],
) -> Result<WidthSweepResult> {
    protocol.validate()?;
    if widths.is_empty() || seeds.is_empty() || modes.is_empty() {
        return Err(Error::config(
            "sweep needs at least one width, seed and mode",
        ));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        let split = gen_kshot(
            &protocol.task,
            protocol.data_seed.unwrap_or(seed),
            protocol.kshot,
            protocol.test_size,
        )?;
        for &width in widths {
            let pretrained = pretrain_student(protocol, width, seed);
            for &mode in modes {
                let cell = match &pretrained {
                    Ok((_, true)) => {
                        SweepCell::failed(mode, width, seed, "pretraining diverged".into())
                    }
                    Ok((net, false)) => run_cell(protocol, net, &split, mode, width, seed)
                        .unwrap_or_else(|e| SweepCell::failed(mode, width, seed, e.to_string())),
                    Err(e) => SweepCell::failed(mode, width, seed, e.to_string()),
                };
                cells.push(cell);
            }
        }
    }
    cells.sort_by_key(|c| {
        (
            modes.iter().position(|m| *m == c.mode),
            widths.iter().position(|w| *w == c.width),
            c.seed,
        )
    });
    let mut summaries = Vec::new();
    for &mode in modes {
        for &width in widths {
            let ok: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.mode == mode && c.width == width && c.error.is_none())
                .collect();
            let med = |f: fn(&SweepCell) -> f64| median(ok.iter().map(|c| f(c)).collect());
            summaries.push(WidthSummary {
                mode,
                width,
                cells: ok.len(),
                chi_max: med(|c| c.chi_max),
                chi_mean: med(|c| c.chi_mean),
                lin_ratio: med(|c| c.lin_ratio),
                drift_feat: med(|c| c.drift_feat),
                drift_kernel: med(|c| c.drift_kernel),
                entk_acc: med(|c| c.entk_acc),
                ft_acc: med(|c| c.ft_acc),
            });
        }
    }
    Ok(WidthSweepResult {
        widths: widths.to_vec(),
        seeds: seeds.to_vec(),
        cells,
        summaries,
    })
}

/// `χ` statistics at the fine-tuning start for every `(width, seed)`;
/// cells whose pretraining diverged are `None`.
pub fn chi_width_test(
    protocol: &SweepProtocol,
    widths: &[usize],
    seeds: &[u64],
    mode: FtMode,
) -> Result<Vec<(usize, u64, Option<ChiStats>)>> {
    protocol.validate()?;
    if widths.len() < 2 {
        return Err(Error::config("chi width test needs at least two widths"));
    }
    let mut out = Vec::new();
    for &width in widths {
        for &seed in seeds {
            let (pretrained, diverged) = pretrain_student(protocol, width, seed)?;
            if diverged {
                out.push((width, seed, None));
                continue;
            }
            let split = gen_kshot(
                &protocol.task,
                protocol.data_seed.unwrap_or(seed),
                protocol.kshot,
                protocol.test_size,
            )?;
            let start = finetune_start(protocol, &pretrained, &split, mode, seed)?;
            out.push((
                width,
                seed,
                Some(chi_stats(&start, &split.train, protocol.finetune.loss)?),
            ));
        }
    }
    Ok(out)
}

pub const SWEEP_CSV_HEADER: &str =
    "width,seed,chi_max,lin_ratio,drift_feat,drift_kernel,entk_acc,ft_acc";

/// Flat CSV of the cells of one mode.
pub fn write_sweep_csv<W: Write>(mut w: W, result: &WidthSweepResult, mode: FtMode) -> Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for c in result.cells.iter().filter(|c| c.mode == mode) {
        writeln!(
            w,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            c.width,
            c.seed,
            c.chi_max,
            c.lin_ratio,
            c.drift_feat,
            c.drift_kernel,
            c.entk_acc,
            c.ft_acc
        )?;
    }
    Ok(())
}

impl Default for SweepProtocol {
    fn default() -> Self {
        let mut task = TaskSpec::binary(16, 4, 0);
        task.min_margin = 1.0;
        let mut pretrain = OptimizerConfig::new(OptimizerKind::Sgd, 0.5, 1500);
        pretrain.batch_size = 16;
        let mut finetune = OptimizerConfig::new(OptimizerKind::Sgd, 0.5, 100);
        finetune.batch_size = 4;
        Self {
            task,
            depth: 2,
            activation: Activation::Tanh,
            pretrain_size: 4000,
            data_seed: Some(0),
            pretrain,
            kshot: 16,
            test_size: 200,
            finetune,
            standard_head: HeadInit::Random,
            solve: SolveConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 7.0, 100.0]),
            1.0
        );
        assert!(spearman(&[1.0, 2.0], &[3.0, 3.0]).is_nan());
    }

    #[test]
    fn trend_predicates() {
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0, 1.0]));
        assert!(!strictly_decreasing(&[1.0]));
        assert!(non_decreasing(&[1.0, 1.0, 2.0]));
        assert!(!non_decreasing(&[1.0, 0.5]));
        assert!(decreasing_trend(&[4.0, 2.0, 3.0, 1.0]));
        assert!(!decreasing_trend(&[4.0, 1.0, 3.0, 2.0]));
        assert!(!decreasing_trend(&[1.0, 0.5, 0.2, 1.5]));
    }

    #[test]
    fn fixed_data_seed_shares_the_split() {
        let mut p = tiny();
        let fixed = chi_width_test(&p, &[8, 8], &[0, 1], FtMode::Prompted).unwrap();
        p.data_seed = None;
        let varied = chi_width_test(&p, &[8, 8], &[0, 1], FtMode::Prompted).unwrap();
        assert_eq!(fixed.len(), varied.len());
        assert_ne!(fixed, varied);
    }

    #[test]
    fn median_skips_nan() {
        assert_eq!(median(vec![3.0, f64::NAN, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    fn tiny() -> SweepProtocol {
        let mut p = SweepProtocol::default();
        p.task.input_dim = 4;
        p.task.min_margin = 0.0;
        p.pretrain_size = 200;
        p.pretrain.steps = 50;
        p.finetune.steps = 10;
        p.kshot = 4;
        p.test_size = 10;
        p
    }

    #[test]
    fn single_width_sweep_has_no_trend_but_valid_cells() {
        let r = width_sweep(&tiny(), &[16], &[1], &[FtMode::Prompted, FtMode::Standard]).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert!(r.cells.iter().all(|c| c.error.is_none()), "{:?}", r.cells);
        assert!(r.trend(FtMode::Prompted, |s| s.chi_max).is_none());
        assert!(r.verdict(&Thresholds::default()).is_err());
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &r, FtMode::Prompted).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), SWEEP_CSV_HEADER);
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn sweep_is_deterministic() {
        let a = width_sweep(&tiny(), &[8, 16], &[2], &[FtMode::Prompted]).unwrap();
        let b = width_sweep(&tiny(), &[8, 16], &[2], &[FtMode::Prompted]).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn chi_test_needs_two_widths() {
        assert!(chi_width_test(&tiny(), &[8], &[0], FtMode::Prompted).is_err());
        let t = chi_width_test(&tiny(), &[8, 16], &[0], FtMode::Standard).unwrap();
        assert_eq!(t.len(), 2);
    }
}
