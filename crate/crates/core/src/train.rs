//! Mini-batch SGD training with a halving learning-rate schedule, exchange
//! and scaling-factor recording, and per-output evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exchange::ExchangeReport;
use crate::graph::Graph;
use crate::metrics::{argmax_labels, Confusion};
use crate::net::{task_loss, CenModel, LossConfig, Mode, Target};
use crate::optim::Sgd;
use crate::synthdata::{make_batch, Sample};
use crate::theorem::GammaTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Halve the learning rate every this many epochs (0 disables).
    pub halve_every: usize,
    pub loss: LossConfig,
    /// Record masked scaling factors every this many steps (0 disables).
    pub record_every: usize,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub eval_batch: usize,
    pub shuffle_seed: u64,
    /// Dataset modalities fed to the model, in stream order.
    pub select: Vec<usize>,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, select: Vec<usize>) -> Self {
        Self {
            epochs: 10,
            batch_size: 6,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            halve_every: 0,
            loss,
            record_every: 0,
            eval_every: 1,
            eval_batch: 32,
            shuffle_seed: 0,
            select,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.halve_every {
            0 => self.lr,
            n => self.lr * 0.5f64.powi((epoch / n) as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("train_config", msg.to_string()));
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.loss.lambda < 0.0 {
            return bad("weight decay and lambda must be >= 0");
        }
        if self.select.is_empty() {
            return bad("no modalities selected");
        }
        Ok(())
    }
}

/// Metrics of one model output on the validation split. Fields that do not
/// apply to the task are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMetrics {
    /// `m<k>` for stream `k`, or `ensemble`.
    pub output: String,
    pub loss: f64,
    pub mean_iou: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mae: f64,
    pub mse: f64,
}

impl OutputMetrics {
    /// The headline metric: mean IoU (higher is better) for segmentation,
    /// MAE (lower is better) for translation.
    pub fn headline(&self) -> f64 {
        if self.mean_iou.is_nan() {
            self.mae
        } else {
            self.mean_iou
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub metrics: Vec<OutputMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeRecord {
    pub step: u64,
    pub layer: usize,
    pub modality: usize,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub epochs: Vec<EpochRecord>,
    pub exchange: Vec<ExchangeRecord>,
    pub trace: GammaTrace,
    pub steps: u64,
}

impl TrainResult {
    pub fn final_metrics(&self) -> &[OutputMetrics] {
        self.epochs
            .iter()
            .rev()
            .find(|e| !e.metrics.is_empty())
            .map_or(&[], |e| e.metrics.as_slice())
    }

    pub fn final_output(&self, output: &str) -> Option<&OutputMetrics> {
        self.final_metrics().iter().find(|m| m.output == output)
    }
}

pub fn train(model: &mut CenModel, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainResult> {
    train_observed(model, train, val, cfg, |_, _, _| {})
}

/// As [`train`], calling `on_step(step, model, report)` after every forward
/// pass, before the parameter update.
pub fn train_observed(
    model: &mut CenModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(u64, &CenModel, &ExchangeReport),
) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.select.len() != model.modalities() {
        return Err(Error::shape("train", &[model.modalities()], &[cfg.select.len()]));
    }
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training split"));
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = GammaTrace::new(model, cfg.record_every);
    let mut exchange = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        sgd.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(train, chunk, &cfg.select)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch.inputs, Mode::Train)?;
            let parts = model.loss(&mut g, &out, &batch.target, &cfg.loss)?;
            on_step(step, model, &out.report);
            for layer in &out.report.layers {
                for (modality, channels) in layer.replaced.iter().enumerate() {
                    exchange.push(ExchangeRecord {
                        step,
                        layer: layer.layer,
                        modality,
                        channels: channels.clone(),
                    });
                }
            }
            let total = g.value(parts.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            let grads = g.backward(parts.total)?;
            sgd.step(&mut model.params, &grads)?;
            loss_sum += total;
            batches += 1;
            step += 1;
            trace.maybe_record(step, model);
        }
        let last = epoch + 1 == cfg.epochs;
        let metrics = if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            evaluate(model, val, cfg)?
        } else {
            Vec::new()
        };
        epochs.push(EpochRecord {
            epoch,
            lr: sgd.lr,
            train_loss: loss_sum / batches.max(1) as f64,
            metrics,
        });
    }
    Ok(TrainResult {
        epochs,
        exchange,
        trace,
        steps: step,
    })
}

enum Accum {
    Seg(Confusion),
    Reg { abs: f64, sq: f64, n: usize },
}

/// Eval-mode metrics for every stream and the ensemble.
pub fn evaluate(model: &mut CenModel, val: &[Sample], cfg: &TrainConfig) -> Result<Vec<OutputMetrics>> {
    if val.is_empty() {
        return Ok(Vec::new());
    }
    let outputs = model.modalities() + 1;
    let classes = model.config.arch.out_channels;
    let mut accs: Vec<Accum> = Vec::with_capacity(outputs);
    let mut losses = vec![0.0; outputs];
    let mut count = 0usize;
    let indices: Vec<usize> = (0..val.len()).collect();
    for chunk in indices.chunks(cfg.eval_batch) {
        let batch = make_batch(val, chunk, &cfg.select)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.inputs, Mode::Eval)?;
        let vars: Vec<_> = out.streams.iter().copied().chain([out.ensemble]).collect();
        for (k, &v) in vars.iter().enumerate() {
            let l = task_loss(&mut g, v, &batch.target, cfg.loss.task)?;
            losses[k] += g.value(l).item() * chunk.len() as f64;
            let pred = g.value(v);
            match &batch.target {
                Target::Labels(truth) => {
                    if accs.len() <= k {
                        accs.push(Accum::Seg(Confusion::new(classes)));
                    }
                    if let Accum::Seg(c) = &mut accs[k] {
                        c.add(&argmax_labels(pred)?, truth)?;
                    }
                }
                Target::Dense(t) => {
                    if accs.len() <= k {
                        accs.push(Accum::Reg { abs: 0.0, sq: 0.0, n: 0 });
                    }
                    if let Accum::Reg { abs, sq, n } = &mut accs[k] {
                        for (p, q) in pred.data().iter().zip(t.data()) {
                            *abs += (p - q).abs();
                            *sq += (p - q).powi(2);
                        }
                        *n += t.numel();
                    }
                }
            }
        }
        count += chunk.len();
    }
    Ok(accs
        .into_iter()
        .enumerate()
        .map(|(k, acc)| {
            let output = if k + 1 == outputs { "ensemble".to_string() } else { format!("m{k}") };
            let loss = losses[k] / count as f64;
            match acc {
                Accum::Seg(c) => OutputMetrics {
                    output,
                    loss,
                    mean_iou: c.mean_iou(),
                    pixel_acc: c.pixel_accuracy(),
                    mean_acc: c.mean_accuracy(),
                    mae: f64::NAN,
                    mse: f64::NAN,
                },
                Accum::Reg { abs, sq, n } => OutputMetrics {
                    output,
                    loss,
                    mean_iou: f64::NAN,
                    pixel_acc: f64::NAN,
                    mean_acc: f64::NAN,
                    mae: abs / n as f64,
                    mse: sq / n as f64,
                },
            }
        })
        .collect())
}
