use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_derivative, step, OptimizerConfig, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub example_ids: Vec<u64>,
    /// Output derivative per batch example, evaluated at the pre-step parameters.
    pub chi: Vec<Vec<f64>>,
    /// Mean batch loss at the pre-step parameters.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_values: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct Snapshot<M> {
    /// Parameters before step `step` was applied.
    pub step: usize,
    pub params: M,
}

#[derive(Clone, Debug)]
pub struct TrainTrace<M> {
    pub initial: M,
    pub final_params: M,
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot<M>>,
    /// Training stopped early because the loss or gradient became non-finite.
    pub diverged: bool,
}

impl<M> TrainTrace<M> {
    pub fn snapshot(&self, step: usize) -> Option<&M> {
        self.snapshots
            .iter()
            .find(|s| s.step == step)
            .map(|s| &s.params)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Endless stream of example indices, one seeded permutation per epoch.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Mini-batch training. Deterministic given `config.seed`.
///
/// Every step records the output derivative of each batch example at the
/// pre-step parameters. A non-finite loss or gradient truncates the trace and
/// sets `diverged`.
pub fn train<M: Model + Clone>(
    model: &M,
    dataset: &Dataset,
    config: &OptimizerConfig,
    probes: &[Vec<f64>],
) -> Result<TrainTrace<M>> {
    config.validate()?;
    dataset.ensure_non_empty()?;
    let mut params = model.clone();
    let mut state = OptimizerState::new(model.num_parameters());
    let mut stream = BatchStream::new(dataset.len(), config.seed);
    let mut records = Vec::with_capacity(config.steps);
    let mut snapshots = Vec::new();
    let mut diverged = false;

    for t in 0..config.steps {
        if config.snapshot_steps.contains(&t) {
            snapshots.push(Snapshot {
                step: t,
                params: params.clone(),
            });
        }
        let batch = stream.next_batch(config.batch_size);
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; params.num_parameters()];
        let mut chis = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        let mut failed = None;
        for &i in &batch {
            let ex = &dataset.examples[i];
            let res = params.forward(&ex.input).and_then(|logits| {
                let (l, chi) = loss_and_derivative(&logits, ex.label, config.loss)?;
                params.accumulate_vjp(&ex.input, &chi, scale, &mut grad)?;
                Ok((l, chi))
            });
            match res {
                Ok((l, chi)) => {
                    loss += l * scale;
                    chis.push(chi);
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        match failed {
            None => {}
            Some(Error::NonFinite { .. }) | Some(Error::Numeric(_)) => {
                diverged = true;
                break;
            }
            Some(e) => return Err(e),
        }

        let probe_values = if config.probe_every > 0 && t % config.probe_every == 0 {
            Some(
                probes
                    .iter()
                    .map(|p| params.forward(p))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        records.push(StepRecord {
            step: t,
            example_ids: batch.iter().map(|&i| dataset.examples[i].id).collect(),
            chi: chis,
            loss,
            probe_values,
        });
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        match step(&mut params, &grad, &mut state, config) {
            Ok(()) => {}
            Err(Error::Numeric(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if !diverged && config.snapshot_steps.contains(&config.steps) {
        snapshots.push(Snapshot {
            step: config.steps,
            params: params.clone(),
        });
    }
    Ok(TrainTrace {
        initial: model.clone(),
        final_params: params,
        records,
        snapshots,
        diverged,
    })
}

/// One JSON object per line.
pub fn write_trace_jsonl<W: Write>(records: &[StepRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl<R: BufRead>(r: R) -> Result<Vec<StepRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::task::{gen_kshot, prompted_network, TaskSpec};
    use crate::netcore::{init_network, Activation, MuPConfig};
    use crate::optim::{output_derivative, OptimizerKind};

    fn setup() -> (crate::netcore::NetworkParams, Dataset) {
        let spec = TaskSpec::binary(6, 4, 1);
        let split = gen_kshot(&spec, 0, 8, 0).unwrap();
        let cfg = MuPConfig::new(32, 2, 6, 4, Activation::Tanh, OptimizerKind::Sgd).unwrap();
        let net = prompted_network(&init_network(&cfg, 2).unwrap(), &spec.class_mapping).unwrap();
        (net, split.train)
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (net, ds) = setup();
        let trace = train(
            &net,
            &ds,
            &OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 0),
            &[],
        )
        .unwrap();
        assert_eq!(trace.final_params, net);
        assert!(trace.records.is_empty());
    }

    #[test]
    fn sgd_reduces_loss_on_separable_task() {
        let (net, ds) = setup();
        let mut cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.5, 200);
        cfg.seed = 3;
        let trace = train(&net, &ds, &cfg, &[]).unwrap();
        let losses = trace.losses();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
        assert!(!trace.diverged);
    }

    #[test]
    fn recorded_chi_matches_snapshot_recomputation() {
        let (net, ds) = setup();
        let mut cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.01, 12);
        cfg.snapshot_steps = vec![0, 5, 11];
        let trace = train(&net, &ds, &cfg, &[]).unwrap();
        for snap in &trace.snapshots {
            let rec = &trace.records[snap.step];
            let ex = ds
                .examples
                .iter()
                .find(|e| e.id == rec.example_ids[0])
                .unwrap();
            let chi =
                output_derivative(&snap.params.forward(&ex.input).unwrap(), ex.label, cfg.loss)
                    .unwrap();
            assert_eq!(chi, rec.chi[0]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (net, ds) = setup();
        let mut cfg = OptimizerConfig::new(OptimizerKind::SignGd, 0.01, 20);
        cfg.batch_size = 3;
        let a = train(&net, &ds, &cfg, &[]).unwrap();
        let b = train(&net, &ds, &cfg, &[]).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn divergence_truncates_trace() {
        let (net, ds) = setup();
        let mut cfg = OptimizerConfig::new(OptimizerKind::Sgd, 1e200, 50);
        cfg.loss = crate::optim::LossKind::Mse;
        let trace = train(&net, &ds, &cfg, &[]).unwrap();
        assert!(trace.diverged);
        assert!(trace.records.len() < 50);
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let (net, ds) = setup();
        let mut cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 4);
        cfg.probe_every = 2;
        let probes = vec![ds.examples[0].input.clone()];
        let trace = train(&net, &ds, &cfg, &probes).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&trace.records, &mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 4);
        assert_eq!(read_trace_jsonl(buf.as_slice()).unwrap(), trace.records);
    }
}
