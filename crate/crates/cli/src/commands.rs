use std::fmt::Write as _;

use entk::data::Dataset;
use entk::dynamics::{diagnose, finetune_start, pretrain_run, width_sweep, write_sweep_csv};
use entk::kernels::{
    compute_features, cross_gram, gram, params_hash, FeatureMode, FeatureSet, GramMatrix,
    KernelKind, DEFAULT_RELATIVE_EPS,
};
use entk::lowrank::{jl_rank, lora_kernel_comparison, measure_c, write_lora_csv, LoraConfig};
use entk::netcore::task::{gen_kshot, KShotSplit};
use entk::netcore::weights::{encode_weights, load_weights};
use entk::netcore::{FtMode, MuPConfig, NetworkParams};
use entk::optim::{train, write_trace_jsonl, OptimizerConfig, TrainTrace};
use entk::solvers::{evaluate, grid_search, predict, write_predictions_csv, Metrics, Split};
use entk::Model;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{mode_name, ExperimentConfig, ProbeSplit};
use crate::error::{CliError, CliResult};
use crate::store::{ArtifactStore, Written};

pub struct Ctx {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub store: ArtifactStore,
}

const SPLITS: [&str; 3] = ["train", "validation", "test"];

impl Ctx {
    fn data_seed(&self) -> u64 {
        self.config.protocol.data_seed.unwrap_or(self.config.seed)
    }

    fn split_rel(&self, part: &str) -> String {
        format!(
            "datasets/task-d{}-k{}/{part}.csv",
            self.data_seed(),
            self.config.protocol.kshot
        )
    }

    fn pretrained_rel(&self) -> String {
        format!(
            "weights/pretrained-w{}-s{}.entkw",
            self.config.width, self.config.seed
        )
    }

    fn start_rel(&self) -> String {
        format!("weights/start-{}.entkw", self.config.run_tag())
    }

    fn finetuned_rel(&self) -> String {
        format!("weights/finetuned-{}.entkw", self.config.run_tag())
    }

    fn gram_rel(&self, kind: KernelKind, part: &str) -> String {
        format!(
            "grams/{}-{}-{part}.entkgram",
            kind.name(),
            self.config.run_tag()
        )
    }

    fn logits(&self) -> Vec<usize> {
        (0..self.config.protocol.task.downstream_classes).collect()
    }

    fn load_split(&self, inputs: &mut Vec<String>) -> CliResult<KShotSplit> {
        let mut parts = Vec::with_capacity(3);
        for part in SPLITS {
            let rel = self.split_rel(part);
            parts.push(Dataset::load(&self.store.require(&rel)?)?);
            inputs.push(self.store.input_ref(&rel)?);
        }
        let test = parts.pop().expect("three splits");
        let validation = parts.pop().expect("three splits");
        let train = parts.pop().expect("three splits");
        Ok(KShotSplit {
            train,
            validation,
            test,
        })
    }

    fn load_weights(&self, rel: &str, inputs: &mut Vec<String>) -> CliResult<NetworkParams> {
        let (params, _) = load_weights(&self.store.require(rel)?)?;
        inputs.push(self.store.input_ref(rel)?);
        Ok(params)
    }

    fn save_weights(
        &self,
        rel: &str,
        params: &NetworkParams,
        mup: Option<&MuPConfig>,
    ) -> CliResult<Written> {
        let provenance = json!({ "config_hash": self.config_hash, "run": self.config.run_tag() });
        let bytes = encode_weights(params, Some(self.config.seed), mup, provenance)?;
        self.store.write_bytes(rel, &bytes)
    }

    fn save_dataset(&self, rel: &str, data: &Dataset) -> CliResult<Written> {
        let mut buf = Vec::new();
        data.write_csv(&mut buf)?;
        self.store.write_bytes(rel, &buf)
    }

    fn save_trace<M>(&self, rel: &str, trace: &TrainTrace<M>) -> CliResult<Written> {
        let mut buf = Vec::new();
        write_trace_jsonl(&trace.records, &mut buf)?;
        self.store.write_bytes(rel, &buf)
    }

    fn save_gram(&self, rel: &str, g: &GramMatrix) -> CliResult<Vec<Written>> {
        let meta_rel = GramMatrix::sidecar_path(std::path::Path::new(rel))
            .to_string_lossy()
            .into_owned();
        Ok(vec![
            self.store.write_bytes(rel, &g.encode())?,
            self.store.write_json(&meta_rel, &g.meta())?,
        ])
    }

    fn load_gram(&self, rel: &str, inputs: &mut Vec<String>) -> CliResult<GramMatrix> {
        let g = GramMatrix::load(&self.store.require(rel)?)?;
        inputs.push(self.store.input_ref(rel)?);
        Ok(g)
    }

    fn record(&self, producer: &str, inputs: &[String], written: Vec<Written>) -> CliResult<()> {
        self.store
            .record(producer, &self.config_hash, inputs, written)
    }
}

/// Writes the k-shot train/validation splits and the test set.
pub fn gen(ctx: &Ctx) -> CliResult<()> {
    let p = &ctx.config.protocol;
    let split = gen_kshot(&p.task, ctx.data_seed(), p.kshot, p.test_size)?;
    let mut written = Vec::new();
    for (part, data) in SPLITS
        .iter()
        .zip([&split.train, &split.validation, &split.test])
    {
        written.push(ctx.save_dataset(&ctx.split_rel(part), data)?);
    }
    println!(
        "wrote {} train, {} validation, {} test examples to {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        ctx.store
            .path(&ctx.split_rel(""))
            .parent()
            .map(|d| d.display().to_string())
            .unwrap_or_default()
    );
    ctx.record("gen", &[], written)
}

pub fn pretrain(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let p = &c.protocol;
    let (data, trace) = pretrain_run(p, c.width, c.seed)?;
    let mup = MuPConfig::new(
        c.width,
        p.depth,
        p.task.input_dim,
        p.task.pretrain_classes,
        p.activation,
        p.pretrain.kind,
    )?;
    let tag = format!("w{}-s{}", c.width, c.seed);
    let mut written = vec![
        ctx.save_dataset(
            &format!("datasets/pretrain-d{}.csv", ctx.data_seed()),
            &data,
        )?,
        ctx.save_trace(&format!("traces/pretrain-{tag}.jsonl"), &trace)?,
    ];
    if trace.diverged {
        ctx.record("pretrain", &[], written)?;
        return Err(CliError::Core(entk::Error::Numeric(
            "pretraining diverged".into(),
        )));
    }
    written.push(ctx.save_weights(&ctx.pretrained_rel(), &trace.final_params, Some(&mup))?);
    println!(
        "pretrained width {} seed {}: final loss {:.4}",
        c.width,
        c.seed,
        last_loss(&trace)
    );
    ctx.record("pretrain", &[], written)
}

fn last_loss<M>(trace: &TrainTrace<M>) -> f64 {
    trace.records.last().map_or(f64::NAN, |r| r.loss)
}

pub fn finetune(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let mut inputs = Vec::new();
    let split = ctx.load_split(&mut inputs)?;
    let pretrained = ctx.load_weights(&ctx.pretrained_rel(), &mut inputs)?;
    let start = finetune_start(&c.protocol, &pretrained, &split, c.mode(), c.seed)?;
    let cfg = OptimizerConfig {
        seed: ctx.data_seed(),
        ..c.protocol.finetune.clone()
    };
    let trace = train(&start, &split.train, &cfg, &[])?;
    let mut written = vec![
        ctx.save_weights(&ctx.start_rel(), &start, None)?,
        ctx.save_trace(&format!("traces/finetune-{}.jsonl", c.run_tag()), &trace)?,
    ];
    if trace.diverged {
        ctx.record("finetune", &inputs, written)?;
        return Err(CliError::Core(entk::Error::Numeric(
            "fine-tuning diverged".into(),
        )));
    }
    written.push(ctx.save_weights(&ctx.finetuned_rel(), &trace.final_params, None)?);
    println!(
        "fine-tuned {} ({} steps): final loss {:.4}",
        c.run_tag(),
        trace.records.len(),
        last_loss(&trace)
    );
    ctx.record("finetune", &inputs, written)
}

/// Per-row gradient norms of the fine-tuning start network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub params_hash: String,
    pub dataset_hash: String,
    pub dim: usize,
    pub num_examples: usize,
    pub logits: Vec<usize>,
    /// `(example id, logit, ‖∇f‖, underflow warning)`, class-major.
    pub rows: Vec<(u64, usize, f64, bool)>,
}

impl FeatureSummary {
    fn of(f: &FeatureSet) -> Self {
        Self {
            params_hash: f.params_hash.clone(),
            dataset_hash: f.dataset_hash.clone(),
            dim: f.dim(),
            num_examples: f.num_examples,
            logits: f.logits.clone(),
            rows: f
                .features
                .iter()
                .map(|g| (g.example_id, g.logit, g.norm, g.underflow_warning))
                .collect(),
        }
    }
}

pub fn features(ctx: &Ctx) -> CliResult<()> {
    let mut inputs = Vec::new();
    let split = ctx.load_split(&mut inputs)?;
    let start = ctx.load_weights(&ctx.start_rel(), &mut inputs)?;
    let f = compute_features(&start, &split.train, &ctx.logits(), FeatureMode::Plain)?;
    let summary = FeatureSummary::of(&f);
    let warned = summary.rows.iter().filter(|r| r.3).count();
    let written = ctx.store.write_json(
        &format!("grams/features-{}.json", ctx.config.run_tag()),
        &summary,
    )?;
    println!(
        "{} feature rows of dimension {}; {warned} with underflow warnings",
        summary.rows.len(),
        summary.dim
    );
    ctx.record("features", &inputs, vec![written])
}

pub fn gram_cmd(ctx: &Ctx) -> CliResult<()> {
    let mut inputs = Vec::new();
    let split = ctx.load_split(&mut inputs)?;
    let start = ctx.load_weights(&ctx.start_rel(), &mut inputs)?;
    let logits = ctx.logits();
    let plain = compute_features(&start, &split.train, &logits, FeatureMode::Plain)?;
    let eps = Some(DEFAULT_RELATIVE_EPS * plain.max_abs());
    let combine = ctx.config.protocol.solve.combine_weight;
    let mut written = Vec::new();
    for &kind in &ctx.config.kernels {
        let rows = if kind.row_mode_is_sign() {
            plain.to_sign(eps)?
        } else {
            plain.clone()
        };
        let cols = if kind.col_mode_is_sign() {
            plain.to_sign(eps)?
        } else {
            plain.clone()
        };
        written.extend(ctx.save_gram(&ctx.gram_rel(kind, "train"), &gram(&rows, &cols, kind)?)?);
        for (part, data) in [("validation", &split.validation), ("test", &split.test)] {
            written.extend(ctx.save_gram(
                &ctx.gram_rel(kind, part),
                &cross_gram(&start, data, &cols, kind)?,
            )?);
            if !kind.is_symmetric() && combine < 1.0 {
                let other =
                    compute_features(&start, data, &logits, FeatureMode::Plain)?.to_sign(eps)?;
                written.extend(ctx.save_gram(
                    &ctx.gram_rel(kind, &format!("train-{part}")),
                    &gram(&rows, &other, kind)?,
                )?);
            }
        }
        println!("built {} Grams for {}", kind.name(), ctx.config.run_tag());
    }
    ctx.record("gram", &inputs, written)
}

/// Test-set evaluation stored next to a fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitEvaluation {
    pub kernel: KernelKind,
    pub run: String,
    pub validation: Option<Metrics>,
    pub test: Metrics,
    pub lambda_rel: Option<f64>,
    pub gamma: Option<f64>,
    pub label_scale: Option<f64>,
}

fn logits_of(model: &dyn Model, data: &Dataset) -> CliResult<Vec<Vec<f64>>> {
    Ok(data
        .examples
        .iter()
        .map(|e| model.forward(&e.input))
        .collect::<entk::Result<_>>()?)
}

pub fn solve(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let mut inputs = Vec::new();
    let split = ctx.load_split(&mut inputs)?;
    let start = ctx.load_weights(&ctx.start_rel(), &mut inputs)?;
    let start_hash = params_hash(&start);
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
    let mut written = Vec::new();
    for &kind in &c.kernels {
        let k_train = ctx.load_gram(&ctx.gram_rel(kind, "train"), &mut inputs)?;
        let k_val = ctx.load_gram(&ctx.gram_rel(kind, "validation"), &mut inputs)?;
        let k_test = ctx.load_gram(&ctx.gram_rel(kind, "test"), &mut inputs)?;
        let transposed = !kind.is_symmetric() && c.protocol.solve.combine_weight < 1.0;
        let (k_tv, k_tt) = if transposed {
            (
                Some(ctx.load_gram(&ctx.gram_rel(kind, "train-validation"), &mut inputs)?),
                Some(ctx.load_gram(&ctx.gram_rel(kind, "train-test"), &mut inputs)?),
            )
        } else {
            (None, None)
        };
        let mut warnings = Vec::new();
        for (g, data) in [
            (&k_train, &split.train),
            (&k_val, &split.validation),
            (&k_test, &split.test),
        ] {
            warnings.extend(g.provenance_warnings(Some(&data.content_hash()), Some(&start_hash)));
        }
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
            k_tv.as_ref(),
            &c.protocol.solve,
        )?;
        let pred = predict(&k_test, &fit, Some(&f0_test), k_tt.as_ref())?;
        let eval = FitEvaluation {
            kernel: kind,
            run: c.run_tag(),
            validation: fit.validation_metrics,
            test: evaluate(&pred.decisions, &y_test)?,
            lambda_rel: fit.hyper.lambda_rel,
            gamma: fit.hyper.gamma,
            label_scale: fit.hyper.label_scale,
        };
        let base = format!("fits/{}-{}", kind.name(), c.run_tag());
        let mut fit_written = ctx.store.write_json(&format!("{base}.json"), &fit)?;
        fit_written.warnings = warnings;
        written.push(fit_written);
        let ids: Vec<u64> = split.test.examples.iter().map(|e| e.id).collect();
        let mut csv = Vec::new();
        write_predictions_csv(&mut csv, &ids, &y_test, &pred)?;
        written.push(
            ctx.store
                .write_bytes(&format!("{base}-predictions.csv"), &csv)?,
        );
        written.push(ctx.store.write_json(&format!("{base}-eval.json"), &eval)?);
        println!(
            "{:<8} test accuracy {:.4}, macro-F1 {:.4}",
            kind.name(),
            eval.test.accuracy,
            eval.test.macro_f1
        );
    }
    ctx.record("solve", &inputs, written)
}

pub fn diagnose_cmd(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let mut inputs = Vec::new();
    let split = ctx.load_split(&mut inputs)?;
    let start = ctx.load_weights(&ctx.start_rel(), &mut inputs)?;
    let post = ctx.load_weights(&ctx.finetuned_rel(), &mut inputs)?;
    let probes = match c.diagnostics.probes {
        ProbeSplit::Test => &split.test,
        ProbeSplit::Validation => &split.validation,
    };
    let report = diagnose(
        &start,
        &post,
        &split.train,
        probes,
        c.protocol.finetune.loss,
        c.protocol.thresholds,
    )?;
    let mut written = vec![ctx.store.write_json(
        &format!("reports/diagnostics-{}.json", c.run_tag()),
        &report,
    )?];
    if c.diagnostics.probe_csv {
        let mut s = String::from("example_id,relative_error,delta_f_norm\n");
        for p in &report.linearization.probes {
            let _ = writeln!(
                s,
                "{},{},{}",
                p.example_id, p.relative_error, p.delta_f_norm
            );
        }
        written.push(ctx.store.write_bytes(
            &format!("reports/linearization-{}.csv", c.run_tag()),
            s.as_bytes(),
        )?);
    }
    let l = &report.linearization;
    println!(
        "χ max {:.4}, linearization ratio {:.3} (PT {:.3}, lin {:.3}, FT {:.3}), feature drift {:.4}, kernel drift {:.4}",
        report.chi.max,
        l.ratio,
        l.acc_pt,
        l.acc_lin,
        l.acc_ft,
        report.fixed_features.max_drift,
        report.fixed_features.kernel.mean_elementwise_relative
    );
    ctx.record("diagnose", &inputs, written)
}

pub fn sweep(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let result = width_sweep(&c.protocol, &c.sweep.widths, &c.sweep.seeds, &c.sweep.modes)?;
    let mut written = vec![ctx.store.write_json("reports/sweep.json", &result)?];
    for &mode in &c.sweep.modes {
        let mut csv = Vec::new();
        write_sweep_csv(&mut csv, &result, mode)?;
        written.push(
            ctx.store
                .write_bytes(&format!("reports/sweep-{}.csv", mode_name(mode)), &csv)?,
        );
    }
    println!(
        "{:<9} {:>6} {:>5} {:>9} {:>9} {:>9} {:>8} {:>8}",
        "mode", "width", "cells", "chi_max", "lin", "drift", "entk", "ft"
    );
    for s in &result.summaries {
        println!(
            "{:<9} {:>6} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>8.3} {:>8.3}",
            mode_name(s.mode),
            s.width,
            s.cells,
            s.chi_max,
            s.lin_ratio,
            s.drift_feat,
            s.entk_acc,
            s.ft_acc
        );
    }
    let both =
        c.sweep.modes.contains(&FtMode::Prompted) && c.sweep.modes.contains(&FtMode::Standard);
    if both && c.sweep.widths.len() >= 2 {
        let verdict = result.verdict(&c.protocol.thresholds)?;
        println!("verdict: {}", if verdict.pass { "pass" } else { "fail" });
        written.push(
            ctx.store
                .write_json("reports/sweep-verdict.json", &verdict)?,
        );
    }
    ctx.record("sweep", &[], written)
}

pub fn lora(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let s = &c.lora;
    let mut inputs = Vec::new();
    let split = ctx.load_split(&mut inputs)?;
    let pretrained = ctx.load_weights(&ctx.pretrained_rel(), &mut inputs)?;
    let start = finetune_start(&c.protocol, &pretrained, &split, c.mode(), c.seed)?;
    let logits = ctx.logits();
    let target = start
        .matrix_index(&s.target)
        .ok_or_else(|| CliError::Config(format!("no matrix named {:?}", s.target)))?;
    let rank = match s.rank {
        Some(r) => r,
        None => jl_rank(
            measure_c(&start, target, &split.train, &logits)?,
            split.train.len(),
            s.eps,
        ),
    };
    let rows = s
        .seeds
        .iter()
        .map(|&seed| {
            lora_kernel_comparison(
                &start,
                &LoraConfig::new(rank, &[s.target.as_str()], seed),
                &split.train,
                &logits,
                s.eps,
            )
        })
        .collect::<entk::Result<Vec<_>>>()?;
    let mut csv = Vec::new();
    write_lora_csv(&mut csv, &rows)?;
    let written = ctx
        .store
        .write_bytes(&format!("reports/lora-{}.csv", c.run_tag()), &csv)?;
    let passed = rows.iter().filter(|r| r.pass).count();
    println!(
        "LoRA rank {rank} on {}: {passed}/{} seeds within c²ε",
        s.target,
        rows.len()
    );
    ctx.record("lora", &inputs, vec![written])
}

/// One number in the summary report and the artifact it came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub artifact: String,
    pub hash: String,
    pub key: String,
    pub value: String,
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        serde_json::Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        serde_json::Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        serde_json::Value::String(s) if !prefix.ends_with("hash") => {
            out.push((prefix.to_string(), s.clone()))
        }
        _ => {}
    }
}

/// Collects every fit evaluation, diagnostics report, sweep verdict and LoRA
/// table in the manifest into `reports/summary.{csv,txt}`.
pub fn report(ctx: &Ctx) -> CliResult<()> {
    let manifest = ctx.store.manifest()?;
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    for e in manifest.current() {
        let a = e.artifact.as_str();
        let json_source = (a.starts_with("fits/") && a.ends_with("-eval.json"))
            || (a.starts_with("reports/diagnostics-") && a.ends_with(".json"))
            || a == "reports/sweep-verdict.json";
        let lora_source = a.starts_with("reports/lora-") && a.ends_with(".csv");
        if !json_source && !lora_source {
            continue;
        }
        let bytes = std::fs::read(ctx.store.require(a)?)?;
        if entk::data::sha256_hex(&bytes) != e.hash {
            return Err(CliError::Core(entk::Error::Corrupt(format!(
                "{a} no longer matches its manifest hash"
            ))));
        }
        let mut pairs = Vec::new();
        if json_source {
            flatten("", &serde_json::from_slice(&bytes)?, &mut pairs);
        } else {
            let text = String::from_utf8_lossy(&bytes);
            let (mut n, mut passed, mut worst) = (0usize, 0usize, 0.0f64);
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 6 {
                    n += 1;
                    passed += usize::from(f[5] == "true");
                    if let (Ok(d), Ok(b)) = (f[3].parse::<f64>(), f[4].parse::<f64>()) {
                        worst = worst.max(d / b);
                    }
                }
            }
            pairs.push(("seeds".into(), n.to_string()));
            pairs.push(("seeds_within_bound".into(), passed.to_string()));
            pairs.push(("worst_dev_over_bound".into(), worst.to_string()));
        }
        inputs.push(format!("{a}@{}", e.hash));
        rows.extend(pairs.into_iter().map(|(key, value)| ReportRow {
            artifact: a.to_string(),
            hash: e.hash.clone(),
            key,
            value,
        }));
    }
    if rows.is_empty() {
        return Err(CliError::Missing(
            "no fit, diagnostics, sweep or LoRA artifacts recorded in the manifest".into(),
        ));
    }
    let mut csv = String::from("artifact,hash,key,value\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.artifact, r.hash, r.key, r.value);
    }
    let width = rows.iter().map(|r| r.key.len()).max().unwrap_or(0);
    let mut text = String::new();
    let mut current = "";
    for r in &rows {
        if r.artifact != current {
            let _ = writeln!(text, "{} [{}]", r.artifact, &r.hash[..12.min(r.hash.len())]);
            current = &r.artifact;
        }
        let _ = writeln!(text, "  {:<width$}  {}", r.key, r.value);
    }
    let written = vec![
        ctx.store
            .write_bytes("reports/summary.csv", csv.as_bytes())?,
        ctx.store
            .write_bytes("reports/summary.txt", text.as_bytes())?,
    ];
    print!("{text}");
    ctx.record("report", &inputs, written)
}
