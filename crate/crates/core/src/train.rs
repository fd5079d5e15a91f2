//! SGD with momentum, the four-phase schedule, and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ParamMut;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::ModuleGraph;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub lr_weights: f64,
    pub lr_masks: f64,
    pub masks_trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl PhaseSchedule {
    /// Four phases: joint search, then weight-only fine-tuning on frozen
    /// masks with decreasing learning rates.
    pub fn four_phase(epochs: [usize; 4], lr_weights: [f64; 4], lr_masks: f64) -> Self {
        PhaseSchedule {
            phases: (0..4)
                .map(|i| Phase {
                    epochs: epochs[i],
                    lr_weights: lr_weights[i],
                    lr_masks: if i == 0 { lr_masks } else { 0.0 },
                    masks_trainable: i == 0,
                })
                .collect(),
        }
    }

    /// ResNeXt on CIFAR: 120/100/50/50 epochs, mask rate 0.2.
    pub fn resnext_cifar() -> Self {
        Self::four_phase([120, 100, 50, 50], [0.1, 0.1, 0.01, 0.001], 0.2)
    }

    /// ResNet on CIFAR: 30/30/10/10 epochs, mask rate 0.3.
    pub fn resnet_cifar() -> Self {
        Self::four_phase([30, 30, 10, 10], [0.1, 0.1, 0.01, 0.001], 0.3)
    }

    /// Desk-scale schedule: 12/10/5/5 epochs.
    pub fn desk(lr_masks: f64) -> Self {
        Self::four_phase([12, 10, 5, 5], [0.1, 0.1, 0.01, 0.001], lr_masks)
    }

    /// Keeps the first `n` phases.
    pub fn truncated(mut self, n: usize) -> Self {
        self.phases.truncate(n);
        self
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut frozen = false;
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.lr_weights >= 0.0 && p.lr_masks >= 0.0) {
                return Err(Error::Config(format!("phase {}: negative learning rate", i + 1)));
            }
            if frozen && p.masks_trainable {
                return Err(Error::Config(format!(
                    "phase {}: masks cannot be trained again after freezing",
                    i + 1
                )));
            }
            frozen |= !p.masks_trainable;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    /// Record elapsed seconds in metrics; off keeps metrics byte-stable.
    pub wall_clock: bool,
    /// Evaluation batch size.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            augment: true,
            wall_clock: false,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum and weight decay must be >= 0".into()));
        }
        if self.batch_size < 2 || self.eval_batch == 0 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor in [`ModuleGraph::params_mut`]
/// order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// `v ← μ·v + g + wd·p` (decay on conv/linear weights only), then
    /// `p ← p − lr·v`. Buffers are reset if the parameter list changed shape.
    pub fn step(&mut self, params: Vec<ParamMut<'_>>, lr: f64, momentum: f64, weight_decay: f64) {
        let matches = self.velocity.len() == params.len()
            && self.velocity.iter().zip(&params).all(|(v, p)| v.len() == p.tensor.len());
        if !matches {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            let wd = if p.decay { weight_decay } else { 0.0 };
            let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
            for ((x, vi), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = momentum * *vi + g + wd * *x;
                *x -= lr * *vi;
            }
        }
    }
}

/// Fraction of rows whose largest logit (first on ties) is the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let k = logits.len() / n;
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count();
    correct as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
}

/// Mean cross-entropy and top-1 accuracy in eval mode.
pub fn evaluate(graph: &mut ModuleGraph, data: &Dataset, batch: usize) -> Result<EvalResult> {
    let logits = graph.predict(&data.images, batch)?;
    let xent = tensor::softmax_xent(&logits, &data.labels)?;
    Ok(EvalResult {
        loss: xent.loss,
        top1: top1_accuracy(&logits, &data.labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub lr_weights: f64,
    pub lr_masks: f64,
    pub active_blocks: usize,
    pub params_effective: usize,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "phase,epoch,split,loss,top1,lr_weights,lr_masks,active_blocks,params_effective,wall_seconds";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{},{},{},{},{:.3}",
            self.phase,
            self.epoch,
            self.split.as_str(),
            self.loss,
            self.top1,
            self.lr_weights,
            self.lr_masks,
            self.active_blocks,
            self.params_effective,
            self.wall_seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Runs every phase of `schedule`. Masks are sampled once per minibatch
/// while trainable and frozen to their top-`K` before the first phase that
/// does not train them. Emits one train row per epoch and, with `test`, one
/// test row. A non-finite loss stops training with the graph in the state
/// that produced it.
pub fn run_phases<R: Rng>(
    graph: &mut ModuleGraph,
    train: &Dataset,
    test: Option<&Dataset>,
    schedule: &PhaseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    schedule.validate()?;
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Config("training set needs at least 2 samples".into()));
    }
    let start = Instant::now();
    let mut sgd = Sgd::default();
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for (pi, phase) in schedule.phases.iter().enumerate() {
        if !phase.masks_trainable && !graph.masks_frozen() {
            graph.freeze_masks();
            log::info!("phase {}: masks frozen to top-K", pi + 1);
        }
        for epoch in 1..=phase.epochs {
            order.shuffle(rng);
            let (mut loss_sum, mut correct, mut seen) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let (x, y) = if cfg.augment {
                    train.batch(chunk, Some(&mut *rng))
                } else {
                    train.batch::<R>(chunk, None)
                };
                if phase.masks_trainable {
                    graph.sample_masks(rng);
                }
                graph.zero_grad();
                let (fwd, xent) = graph.forward_loss(&x, &y, crate::tensor::Mode::Train)?;
                if !xent.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} in phase {} epoch {epoch}",
                        xent.loss,
                        pi + 1
                    )));
                }
                graph.backward(&fwd, &xent.grad)?;
                sgd.step(graph.params_mut(), phase.lr_weights, cfg.momentum, cfg.weight_decay);
                if phase.masks_trainable && phase.lr_masks > 0.0 {
                    graph.update_masks(phase.lr_masks)?;
                }
                loss_sum += xent.loss * chunk.len() as f64;
                correct += top1_accuracy(&fwd.logits, &y) * chunk.len() as f64;
                seen += chunk.len();
            }
            let wall = if cfg.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let mut row = MetricsRow {
                phase: pi + 1,
                epoch,
                split: Split::Train,
                loss: loss_sum / seen.max(1) as f64,
                top1: correct / seen.max(1) as f64,
                lr_weights: phase.lr_weights,
                lr_masks: if phase.masks_trainable { phase.lr_masks } else { 0.0 },
                active_blocks: graph.active_blocks(),
                params_effective: graph.effective_param_count(),
                wall_seconds: wall,
            };
            log::info!("{}", row.csv_line());
            on_row(&row);
            rows.push(row.clone());
            if let Some(test) = test {
                let ev = evaluate(graph, test, cfg.eval_batch)?;
                row.split = Split::Test;
                row.loss = ev.loss;
                row.top1 = ev.top1;
                log::info!("{}", row.csv_line());
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
