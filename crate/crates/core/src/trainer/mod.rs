//! Synthetic multi-task data, the adapted toy model and the training loop.
//!
//! One optimizer step accumulates gradients over `grad_accum` micro-batches
//! of `batch_size` samples. The per-micro-batch objective is
//! `CE + λ · Σ_layers L_con`, where each layer's contrastive term is the mean
//! over its tokens. With `λ = 0` no expert is evaluated beyond the routed
//! ones and no contrastive graph is built.
//!
//! Each run derives four independent RNG streams from its seed: parameter
//! init, epoch shuffling, dropout masks and anchor sampling.

mod data;
mod model;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, LoraScaling};
use crate::autograd::{self as ag, Tensor, TensorError};
use crate::contrastive::{self, ContrastiveConfig, ContrastiveError, LossBreakdown, LossVariant};
use crate::diagnostics;
use crate::SeededRng;

pub use data::{generate_dataset, Dataset, Split, SyntheticTaskSpec};
pub use model::{AdaptedLayers, DenseLayer, ModelOutput, ToyModel};
pub use optim::{AdamW, AdamWConfig};

pub const METRICS_CSV_HEADER: &str = "# comoe-metrics v1";
pub const SWEEP_CSV_HEADER: &str = "# comoe-sweep v1";

/// The λ grid used by `sweep-lambda` when none is given.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

/// Stream ids passed to [`rng_stream`].
pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;
pub const STREAM_ANCHOR: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {quantity} at step {step} ({location})")]
    NonFinite {
        step: usize,
        location: String,
        quantity: &'static str,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_experts: usize,
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub scaling: LoraScaling,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub loss_variant: LossVariant,
    pub stop_grad_negatives: bool,
    pub seed: u64,
    pub hidden_dim: usize,
    pub adapted_layers: AdaptedLayers,
    pub router_init_std: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            k: 2,
            rank: 16,
            alpha: 32.0,
            scaling: LoraScaling::AlphaOverRank,
            lr: 2e-4,
            batch_size: 16,
            grad_accum: 8,
            epochs: 2,
            dropout: 0.05,
            lambda: 0.01,
            tau: 0.07,
            epsilon: 1e-3,
            loss_variant: LossVariant::SampledAnchor,
            stop_grad_negatives: false,
            seed: 0,
            hidden_dim: 64,
            adapted_layers: AdaptedLayers::Both,
            router_init_std: 0.02,
            weight_decay: 0.01,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.k == 0 || self.k >= self.n_experts {
            return bad(format!("need 1 <= k < n_experts (k = {}, n = {})", self.k, self.n_experts));
        }
        if self.lambda > 0.0 && self.k < 2 {
            return bad("the contrastive loss needs k >= 2".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("tau", self.tau),
            ("epsilon", self.epsilon),
            ("router_init_std", self.router_init_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("rank", self.rank),
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("epochs", self.epochs),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.tau,
            epsilon: self.epsilon,
            variant: self.loss_variant,
            stop_grad_negatives: self.stop_grad_negatives,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Stream `stream` of the run seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Run config plus the dataset it trains on; the shape of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data_seed: u64,
    pub dataset: SyntheticTaskSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub accuracy: f64,
    pub task_accuracy: Vec<f64>,
}

/// Append-only record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Top-k selection of one evaluation token at one adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub token: usize,
    pub task: usize,
    pub layer: usize,
    pub topk: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub task_accuracy: Vec<f64>,
    pub routing: Vec<RoutingRecord>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: ToyModel,
    pub optimizer: AdamW,
    pub step: usize,
    pub log: MetricsLog,
    /// Routing of the test split under the final model.
    pub routing: Vec<RoutingRecord>,
}

impl TrainState {
    pub fn final_accuracy(&self) -> f64 {
        self.log.evals.last().map_or(f64::NAN, |e| e.accuracy)
    }
}

const EVAL_CHUNK: usize = 256;

/// Accuracy (overall and per task) and routing on `split`, without dropout.
pub fn evaluate(model: &ToyModel, split: &Split, num_tasks: usize) -> Result<EvalResult, TrainError> {
    let mut correct = vec![0usize; num_tasks];
    let mut seen = vec![0usize; num_tasks];
    let mut routing = Vec::new();
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = Tensor::new(split.gather(chunk), &[chunk.len(), split.dim])?;
        let out = model.forward(&x, false, None)?;
        for (r, row) in out.logits.to_rows().iter().enumerate() {
            let i = chunk[r];
            let pred = argmax(row);
            let t = split.tasks[i];
            seen[t] += 1;
            if pred == split.labels[i] {
                correct[t] += 1;
            }
        }
        for (layer, lo) in out.layers.iter().enumerate() {
            if let Some(lo) = lo {
                for (r, d) in lo.decisions.iter().enumerate() {
                    routing.push(RoutingRecord {
                        token: chunk[r],
                        task: split.tasks[chunk[r]],
                        layer,
                        topk: d.topk_indices.clone(),
                    });
                }
            }
        }
    }
    let total: usize = seen.iter().sum();
    Ok(EvalResult {
        accuracy: correct.iter().sum::<usize>() as f64 / total.max(1) as f64,
        task_accuracy: correct
            .iter()
            .zip(&seen)
            .map(|(c, s)| if *s == 0 { f64::NAN } else { *c as f64 / *s as f64 })
            .collect(),
        routing,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn non_finite(step: usize, location: impl Into<String>, quantity: &'static str) -> TrainError {
    TrainError::NonFinite {
        step,
        location: location.into(),
        quantity,
    }
}

/// Runs the full loop and returns the trained state.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainState, TrainError> {
    config.validate()?;
    let ccfg = config.contrastive();
    ccfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::Data("empty training split".into()));
    }
    let mut init_rng = rng_stream(config.seed, STREAM_INIT);
    let mut shuffle_rng = rng_stream(config.seed, STREAM_SHUFFLE);
    let mut dropout_rng = rng_stream(config.seed, STREAM_DROPOUT);
    let mut anchor_rng = rng_stream(config.seed, STREAM_ANCHOR);

    let mut model = ToyModel::init(config, dataset.input_dim(), dataset.num_classes(), &mut init_rng)?;
    let mut optimizer = AdamW::new(config.adamw());
    let mut log = MetricsLog::default();
    let mut step = 0usize;
    let use_con = config.lambda > 0.0;
    let train = &dataset.train;
    let mut routing = Vec::new();

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let micro: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for group in micro.chunks(config.grad_accum) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let share = 1.0 / group.len() as f64;
            let (mut ce_sum, mut con_sum) = (0.0, 0.0);
            for mb in group {
                let x = Tensor::new(train.gather(mb), &[mb.len(), train.dim])?;
                let labels: Vec<usize> = mb.iter().map(|&i| train.labels[i]).collect();
                let out = model.forward(&x, use_con, Some(&mut dropout_rng))?;
                let ce = ag::cross_entropy(&out.logits, &labels)?;
                if !ce.item().is_finite() {
                    return Err(non_finite(step, "output", "cross-entropy"));
                }
                let mut loss = ce.clone();
                if use_con {
                    let mut con: Option<Tensor> = None;
                    for (layer, lo) in out.layers.iter().enumerate() {
                        let Some(lo) = lo else { continue };
                        if let Some(c) = contrastive::layer_loss(lo, &ccfg, &mut anchor_rng)? {
                            if !c.item().is_finite() {
                                return Err(non_finite(step, format!("layer {layer}"), "contrastive loss"));
                            }
                            con = Some(match con {
                                Some(acc) => ag::add(&acc, &c)?,
                                None => c,
                            });
                        }
                    }
                    if let Some(con) = con {
                        con_sum += con.item();
                        loss = ag::add(&loss, &ag::scale(&con, config.lambda))?;
                    }
                }
                ag::scale(&loss, share).backward()?;
                ce_sum += ce.item();
            }
            let breakdown = contrastive::total_loss(ce_sum * share, con_sum * share, config.lambda)?;
            if !breakdown.total.is_finite() {
                return Err(non_finite(step, "objective", "total loss"));
            }
            optimizer.step_accumulated(&mut model.parameters_mut())?;
            step += 1;
            log.steps.push(StepRecord { step, epoch, loss: breakdown });
        }
        let eval = evaluate(&model, &dataset.test, dataset.num_tasks())?;
        log.evals.push(EvalRecord {
            step,
            epoch,
            accuracy: eval.accuracy,
            task_accuracy: eval.task_accuracy,
        });
        routing = eval.routing;
    }
    if log.evals.last().is_none_or(|e| e.step != step) {
        let eval = evaluate(&model, &dataset.test, dataset.num_tasks())?;
        log.evals.push(EvalRecord {
            step,
            epoch: log.steps.last().map_or(0, |s| s.epoch),
            accuracy: eval.accuracy,
            task_accuracy: eval.task_accuracy,
        });
        routing = eval.routing;
    }
    Ok(TrainState {
        config: config.clone(),
        model,
        optimizer,
        step,
        log,
        routing,
    })
}

/// Long-format metrics: one `step` row per optimizer step, one `eval` row per
/// task (plus `all`) per evaluation.
pub fn write_metrics_csv<W: Write>(mut out: W, log: &MetricsLog) -> Result<(), TrainError> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| TrainError::Io(e.into());
    w.write_record(["kind", "step", "epoch", "ce", "con", "total", "lambda", "task", "accuracy"])
        .map_err(io)?;
    for s in &log.steps {
        w.write_record([
            "step".to_string(),
            s.step.to_string(),
            s.epoch.to_string(),
            s.loss.ce.to_string(),
            s.loss.con.to_string(),
            s.loss.total.to_string(),
            s.loss.lambda.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(io)?;
    }
    for e in &log.evals {
        let tasks = e
            .task_accuracy
            .iter()
            .enumerate()
            .map(|(t, a)| (t.to_string(), *a))
            .chain(std::iter::once(("all".to_string(), e.accuracy)));
        for (task, acc) in tasks {
            w.write_record([
                "eval".to_string(),
                e.step.to_string(),
                e.epoch.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                task,
                acc.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One `(λ, seed)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
    /// Mean |cos| between distinct experts' representations on the test split.
    pub off_diag_mean: f64,
    /// Mean pairwise JSD between per-task expert-usage rows.
    pub workload_jsd: f64,
    pub final_ce: f64,
    pub final_con: f64,
}

/// Trains one run and summarizes it.
pub fn run_cell(config: &TrainConfig, dataset: &Dataset) -> Result<SweepRow, TrainError> {
    let state = train(config, dataset)?;
    let diag = diagnostics::run_diagnostics(&state.model, &dataset.test, dataset.num_tasks())
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let last = state.log.steps.last();
    Ok(SweepRow {
        lambda: config.lambda,
        seed: config.seed,
        accuracy: state.final_accuracy(),
        off_diag_mean: diag.off_diag_mean,
        workload_jsd: diag.workload_jsd,
        final_ce: last.map_or(f64::NAN, |s| s.loss.ce),
        final_con: last.map_or(f64::NAN, |s| s.loss.con),
    })
}

/// One run per `(λ, seed)`, in parallel. Rows come back λ-major in input
/// order regardless of scheduling.
pub fn sweep_lambda(
    config: &TrainConfig,
    dataset: &Dataset,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, TrainError> {
    let cells: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(lambda, seed)| {
            let cfg = TrainConfig {
                lambda,
                seed,
                ..config.clone()
            };
            run_cell(&cfg, dataset)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<(), TrainError> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| TrainError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Median of the finite values; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
