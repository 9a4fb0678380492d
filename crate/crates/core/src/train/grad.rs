//! Forward pass with caches and hand-derived reverse-mode gradients.
//!
//! Rounding uses the straight-through estimator: the derivative of every
//! rounding step is 1, clipping passes gradients only inside `[n, p]`.
//! Pre-activations are computed in factored form,
//! `(sum_j x_code * w_code) * (s_x * s_w) + b`, so with integer codes the
//! dot product is exact and matches the integer pipeline bit for bit.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::model::{EffectiveWeights, Model, Weights};
use crate::qcore::{clip, QuantSpec};
use crate::wnq::Rounding;

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input codes, `[batch][k]`.
    pub x_codes: Vec<f64>,
    pub x_scale: f64,
    pub eff: EffectiveWeights,
    pub pre: Vec<f64>,
    /// Post-ReLU values before output quantization.
    pub y: Vec<f64>,
    pub out_codes: Vec<f64>,
    pub out_scale: f64,
    pub out_inside: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    /// Real-valued network outputs, `[batch][out_features]`.
    pub outputs: Vec<f64>,
    pub input_raw: Vec<f64>,
    pub input_inside: Vec<bool>,
    pub layers: Vec<LayerCache>,
}

/// Quantizes `vals` with `q` (half-even unless relaxed), returning codes and
/// STE masks.
fn act_quant(vals: &[f64], q: &QuantSpec, rounding: Rounding) -> (Vec<f64>, Vec<bool>) {
    let s = q.scale();
    let (n, p) = (q.dtype.min() as f64, q.dtype.max() as f64);
    vals.iter()
        .map(|&y| {
            let z = y / s;
            let r = match rounding {
                Rounding::Quantized => z.round_ties_even(),
                Rounding::Relaxed => z,
            };
            (clip(r, n, p) + 0.0, z >= n && z <= p)
        })
        .unzip()
}

/// Integer-valued dot product of two code rows.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn forward(model: &Model, x: &[f64], batch: usize, rounding: Rounding) -> Result<ForwardPass> {
    let d_in = model.in_features();
    if x.len() != batch * d_in {
        return Err(Error::Shape { expected: format!("[{batch}][{d_in}]"), got: format!("{} values", x.len()) });
    }
    let (mut codes, mut scale, input_inside) = match &model.input {
        Some(q) => {
            let (c, m) = act_quant(x, q, rounding);
            (c, q.scale(), m)
        }
        None => (x.to_vec(), 1.0, Vec::new()),
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let (k, c) = (layer.k(), layer.channels());
        let eff = model.effective_weights(l, rounding)?;
        let mut pre = vec![0.0; batch * c];
        for b in 0..batch {
            let xb = &codes[b * k..(b + 1) * k];
            for i in 0..c {
                let acc = dot(xb, &eff.codes[i * k..(i + 1) * k]);
                pre[b * c + i] = acc * (scale * eff.scales[i]) + layer.bias[i];
            }
        }
        let y: Vec<f64> = if layer.activation.relu { pre.iter().map(|&v| v.max(0.0)).collect() } else { pre.clone() };
        let (out_codes, out_scale, out_inside) = match &layer.activation.quant {
            Some(q) => {
                let (c, m) = act_quant(&y, q, rounding);
                (c, q.scale(), m)
            }
            None => (y.clone(), 1.0, Vec::new()),
        };
        layers.push(LayerCache {
            x_codes: std::mem::take(&mut codes),
            x_scale: scale,
            eff,
            pre,
            y,
            out_codes: out_codes.clone(),
            out_scale,
            out_inside,
        });
        codes = out_codes;
        scale = out_scale;
    }
    let outputs = codes.iter().map(|c| c * scale).collect();
    Ok(ForwardPass { batch, outputs, input_raw: x.to_vec(), input_inside, layers })
}

/// Gradients mirroring the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// Float / baseline `w`, or wnq `v`.
    pub w: Vec<f64>,
    pub t: Vec<f64>,
    pub d: Vec<f64>,
    pub bias: Vec<f64>,
    pub act_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub input_d: f64,
    pub layers: Vec<LayerGrads>,
}

impl Grads {
    /// Flat views in the same order as [`crate::train::optim::param_groups`].
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![std::slice::from_ref(&self.input_d)];
        for g in &self.layers {
            out.push(&g.w);
            out.push(&g.t);
            out.push(&g.d);
            out.push(&g.bias);
            out.push(std::slice::from_ref(&g.act_d));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups().concat()
    }
}

/// Scale gradient of `s * clip(round(x / s))` with respect to `log2 s`:
/// `(code - inside * x / s) * s * ln 2` per element.
#[inline]
fn log_scale_grad(code: f64, x: f64, inside: bool, s: f64) -> f64 {
    let pass = if inside { x / s } else { 0.0 };
    (code - pass) * s * LN_2
}

/// Backpropagates `d_out` (gradient of the loss with respect to the real
/// outputs) through the cached forward pass.
pub fn backward(model: &Model, fp: &ForwardPass, d_out: &[f64]) -> Grads {
    let batch = fp.batch;
    let mut g_out = d_out.to_vec();
    let mut layer_grads = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let cache = &fp.layers[l];
        let (k, c) = (layer.k(), layer.channels());

        let mut act_d = 0.0;
        let mut g_pre = vec![0.0; batch * c];
        for idx in 0..batch * c {
            let relu_pass = !layer.activation.relu || cache.pre[idx] > 0.0;
            let quant_pass = if layer.activation.quant.is_some() {
                act_d += g_out[idx] * log_scale_grad(cache.out_codes[idx], cache.y[idx], cache.out_inside[idx], cache.out_scale);
                cache.out_inside[idx]
            } else {
                true
            };
            if relu_pass && quant_pass {
                g_pre[idx] = g_out[idx];
            }
        }

        let mut bias = vec![0.0; c];
        for b in 0..batch {
            for i in 0..c {
                bias[i] += g_pre[b * c + i];
            }
        }

        let eff = &cache.eff;
        let mut g_w_real = vec![0.0; c * k];
        let mut g_x_real = vec![0.0; batch * k];
        for b in 0..batch {
            let xb = &cache.x_codes[b * k..(b + 1) * k];
            for i in 0..c {
                let g = g_pre[b * c + i];
                if g == 0.0 {
                    continue;
                }
                let w_scale = eff.scales[i];
                let row = &eff.codes[i * k..(i + 1) * k];
                let gw = &mut g_w_real[i * k..(i + 1) * k];
                for j in 0..k {
                    gw[j] += g * xb[j] * cache.x_scale;
                    g_x_real[b * k + j] += g * row[j] * w_scale;
                }
            }
        }

        let mut grads = LayerGrads { w: vec![0.0; c * k], t: Vec::new(), d: Vec::new(), bias, act_d };
        match &layer.weights {
            Weights::Float { .. } => grads.w = g_w_real,
            Weights::Baseline { w, .. } => {
                grads.d = vec![0.0; c];
                for i in 0..c {
                    let s = eff.scales[i];
                    for j in i * k..(i + 1) * k {
                        if eff.inside[j] {
                            grads.w[j] = g_w_real[j];
                        }
                        grads.d[i] += g_w_real[j] * log_scale_grad(eff.codes[j], w[j], eff.inside[j], s);
                    }
                }
            }
            Weights::Wnq { v, .. } => {
                grads.t = vec![0.0; c];
                grads.d = vec![0.0; c];
                let traces = eff.traces.as_ref().expect("wnq layers carry traces");
                for (i, tr) in traces.iter().enumerate() {
                    let s = tr.scale;
                    let vrow = &v[i * k..(i + 1) * k];
                    let mut d_ratio = 0.0;
                    let mut d_dir = vec![0.0; k];
                    let mut d_direct = 0.0;
                    for j in 0..k {
                        let gw = g_w_real[i * k + j];
                        d_direct += gw * tr.codes[j] * s * LN_2;
                        if tr.inside[j] {
                            let gz = gw * s;
                            d_ratio += gz * tr.direction[j];
                            d_dir[j] = gz * tr.norm_ratio;
                        }
                    }
                    // u = v / ||v||_1
                    let norm = tr.v_norm;
                    let proj: f64 = d_dir.iter().zip(vrow).map(|(g, v)| g * v).sum();
                    for j in 0..k {
                        let sign = if vrow[j] > 0.0 {
                            1.0
                        } else if vrow[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grads.w[i * k + j] = d_dir[j] / norm - sign * proj / (norm * norm);
                    }
                    let mut dd = d_direct;
                    if !tr.capped {
                        // ratio = 2^(t - d)
                        let g = d_ratio * tr.norm_ratio * LN_2;
                        grads.t[i] += g;
                        dd -= g;
                    }
                    grads.d[i] = dd;
                }
            }
        }
        layer_grads.push(grads);

        if l == 0 {
            if let Some(q) = &model.input {
                let s = q.scale();
                let input_d: f64 = (0..batch * k)
                    .map(|idx| g_x_real[idx] * log_scale_grad(cache.x_codes[idx], fp.input_raw[idx], fp.input_inside[idx], s))
                    .sum();
                layer_grads.reverse();
                return Grads { input_d, layers: layer_grads };
            }
        }
        g_out = g_x_real;
    }
    layer_grads.reverse();
    Grads { input_d: 0.0, layers: layer_grads }
}

/// Adds `lambda * d(penalty)` to `grads`. With `T = const + d`, each capped
/// channel contributes `+lambda` to `t` and `-lambda` to `d`.
pub fn add_penalty_grad(model: &Model, lambda: f64, grads: &mut Grads) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    for (l, layer) in model.layers.iter().enumerate() {
        if let (Weights::Wnq { t, d, .. }, Some(c)) = (&layer.weights, model.constraint(l)?) {
            let g = &mut grads.layers[l];
            for i in 0..t.len() {
                if t[i] > crate::wnq::cap_t(&c, d[i]) {
                    g.t[i] += lambda;
                    g.d[i] -= lambda;
                }
            }
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + m - row[y];
        for i in 0..classes {
            let p = exps[i] / sum;
            grad[b * classes + i] = (p - if i == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}

/// Index of the largest value per row; ties resolve to the first index.
pub fn argmax_rows(values: &[f64], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
