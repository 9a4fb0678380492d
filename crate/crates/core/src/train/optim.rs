use serde::{Deserialize, Serialize};

use crate::model::{Model, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Mutable parameter slices with a weight-decay flag, in the order used by
/// [`crate::train::grad::Grads::groups`].
pub fn param_groups(model: &mut Model) -> Vec<(bool, &mut [f64])> {
    let mut out: Vec<(bool, &mut [f64])> = Vec::new();
    match &mut model.input {
        Some(q) => out.push((false, std::slice::from_mut(&mut q.d))),
        None => out.push((false, &mut [])),
    }
    for layer in &mut model.layers {
        let (w, t, d): (&mut [f64], &mut [f64], &mut [f64]) = match &mut layer.weights {
            Weights::Float { w } => (w, &mut [], &mut []),
            Weights::Baseline { w, d } => (w, &mut [], d),
            Weights::Wnq { v, t, d } => (v, t, d),
        };
        out.push((true, w));
        out.push((false, t));
        out.push((false, d));
        out.push((false, &mut layer.bias));
        match &mut layer.activation.quant {
            Some(q) => out.push((false, std::slice::from_mut(&mut q.d))),
            None => out.push((false, &mut [])),
        }
    }
    out
}

/// SGD with momentum or Adam. Weight decay is an L2 term on direction and
/// raw weight parameters only.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self { kind, momentum, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[&[f64]], lr: f64) {
        let groups = param_groups(model);
        assert_eq!(groups.len(), grads.len(), "gradient layout does not match the model");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (bc1, bc2) = (1.0 - self.beta1.powi(self.step as i32), 1.0 - self.beta2.powi(self.step as i32));
        for (gi, ((decay, params), grad)) in groups.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for j in 0..params.len() {
                let mut g = grad[j];
                if decay {
                    g += self.weight_decay * params[j];
                }
                match self.kind {
                    OptimizerKind::Sgd => {
                        m[j] = self.momentum * m[j] + g;
                        params[j] -= lr * m[j];
                    }
                    OptimizerKind::Adam => {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        params[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Step decay: `lr * factor^(epoch / period)`.
pub fn scheduled_lr(lr: f64, factor: f64, period: usize, epoch: usize) -> f64 {
    if period == 0 {
        lr
    } else {
        lr * factor.powi((epoch / period) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay() {
        assert_eq!(scheduled_lr(1.0, 0.5, 10, 9), 1.0);
        assert_eq!(scheduled_lr(1.0, 0.5, 10, 10), 0.5);
        assert_eq!(scheduled_lr(1.0, 0.5, 10, 25), 0.25);
        assert_eq!(scheduled_lr(1.0, 0.5, 0, 25), 1.0);
    }
}
