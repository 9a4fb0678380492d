//! Deterministic training for small quantized MLPs.

pub mod grad;
pub mod optim;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Model, QuantizerKind};
use crate::wnq::Rounding;

pub use grad::{backward, forward, Grads};
pub use optim::{OptimizerKind, Optimizer};

fn default_momentum() -> f64 {
    0.9
}

fn default_lambda() -> f64 {
    1e-2
}

/// Optimization hyperparameters for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(with = "crate::reals")]
    pub learning_rate: f64,
    /// Multiplicative decay applied every `lr_period` epochs.
    #[serde(with = "crate::reals")]
    pub lr_factor: f64,
    pub lr_period: usize,
    #[serde(default, with = "crate::reals")]
    pub weight_decay: f64,
    /// Lagrange multiplier on the norm penalty.
    #[serde(default = "default_lambda", with = "crate::reals")]
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum", with = "crate::reals")]
    pub momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.lr_factor > 0.0) {
            return bad("lr_factor", "must be positive");
        }
        Ok(())
    }
}

/// `task_loss + lambda * penalty`.
pub fn total_loss(task_loss: f64, penalty: f64, lambda: f64) -> f64 {
    task_loss + lambda * penalty
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub penalty: f64,
    /// Classification accuracy on the training set after the epoch.
    pub metric: f64,
    pub sparsity: f64,
}

/// Task loss, gradients and penalty for one mini-batch.
pub fn batch_gradients(model: &Model, x: &[f64], y: &[usize], lambda: f64, rounding: Rounding) -> Result<(f64, Grads)> {
    let fp = forward(model, x, y.len(), rounding)?;
    let (loss, d_out) = grad::softmax_cross_entropy(&fp.outputs, y, model.out_features());
    let mut g = backward(model, &fp, &d_out);
    grad::add_penalty_grad(model, lambda, &mut g)?;
    Ok((loss, g))
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let fp = forward(model, &data.features, data.len(), Rounding::Quantized)?;
    let pred = grad::argmax_rows(&fp.outputs, model.out_features());
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of zero integer weights over all quantized layers (0 for float
/// models).
pub fn model_sparsity(model: &Model) -> Result<f64> {
    if !model.is_quantized() {
        return Ok(0.0);
    }
    let mut zeros = 0.0;
    let mut total = 0.0;
    for l in 0..model.layers.len() {
        let w = model.integer_weights(l)?;
        zeros += metrics::sparsity(&w) * w.len() as f64;
        total += w.len() as f64;
    }
    Ok(zeros / total)
}

/// Trains `model` in place. `first_epoch` offsets the reported epoch numbers.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    first_epoch: usize,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    model.validate()?;
    if data.dim != model.in_features() {
        return Err(Error::Shape { expected: format!("{} features", model.in_features()), got: format!("{}", data.dim) });
    }
    let lambda = if model.layers.iter().any(|l| l.spec.kind == QuantizerKind::Wnq) { cfg.lambda } else { 0.0 };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = optim::scheduled_lr(cfg.learning_rate, cfg.lr_factor, cfg.lr_period, epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.gather(chunk);
            let (loss, g) = batch_gradients(model, &x, &y, lambda, Rounding::Quantized)?;
            if !loss.is_finite() || g.flatten().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch: first_epoch + epoch, step, loss });
            }
            opt.step(model, &g.groups(), lr);
            loss_sum += loss;
            batches += 1;
        }
        log.push(EpochMetrics {
            epoch: first_epoch + epoch,
            task_loss: loss_sum / batches as f64,
            penalty: model.penalty()?,
            metric: accuracy(model, data)?,
            sparsity: model_sparsity(model)?,
        });
    }
    Ok(log)
}
