//! Fully-connected quantized networks.
//!
//! A model is an optional input quantizer followed by dense layers. Each
//! layer carries its weight parameters (float, baseline-quantized or
//! accumulator-constrained), a real bias and an output activation with an
//! optional quantizer. Hidden activations follow a ReLU and are unsigned;
//! the last layer's output is signed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{DType, IntTensor, QuantSpec};
use crate::wnq::{self, trace_channel, AccumConstraint, Rounding, WnqTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Float,
    Baseline,
    Wnq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weight_bits: u32,
    /// Bit width of this layer's output activation.
    pub act_bits: u32,
    pub act_signed: bool,
    pub kind: QuantizerKind,
    /// Target accumulator width; required for `wnq` layers.
    pub p_star: Option<u32>,
}

impl LayerSpec {
    pub fn weight_dtype(&self) -> Result<DType> {
        DType::signed(self.weight_bits)
    }

    pub fn act_dtype(&self) -> Result<DType> {
        DType::new(self.act_bits, self.act_signed)
    }
}

/// Learnable weight parameters, row-major `[out_features][in_features]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weights {
    Float {
        #[serde(with = "crate::reals::vec")]
        w: Vec<f64>,
    },
    Baseline {
        #[serde(with = "crate::reals::vec")]
        w: Vec<f64>,
        /// Per-channel log2 scale.
        #[serde(with = "crate::reals::vec")]
        d: Vec<f64>,
    },
    Wnq {
        #[serde(with = "crate::reals::vec")]
        v: Vec<f64>,
        #[serde(with = "crate::reals::vec")]
        t: Vec<f64>,
        #[serde(with = "crate::reals::vec")]
        d: Vec<f64>,
    },
}

impl Weights {
    pub fn kind(&self) -> QuantizerKind {
        match self {
            Weights::Float { .. } => QuantizerKind::Float,
            Weights::Baseline { .. } => QuantizerKind::Baseline,
            Weights::Wnq { .. } => QuantizerKind::Wnq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub relu: bool,
    /// Per-tensor output quantizer (half-even rounding); `None` for float layers.
    pub quant: Option<QuantSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub spec: LayerSpec,
    pub weights: Weights,
    #[serde(with = "crate::reals::vec")]
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn k(&self) -> usize {
        self.spec.in_features
    }

    pub fn channels(&self) -> usize {
        self.spec.out_features
    }
}

/// Weights as seen by the forward pass: codes times a per-channel scale.
#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    /// Row-major codes (integer-valued unless relaxed; raw weights for float layers).
    pub codes: Vec<f64>,
    pub scales: Vec<f64>,
    /// STE pass-through mask per weight.
    pub inside: Vec<bool>,
    pub traces: Option<Vec<WnqTrace>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// Input quantizer; `None` for float models.
    pub input: Option<QuantSpec>,
    pub layers: Vec<DenseLayer>,
}

impl Model {
    pub fn in_features(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec.in_features)
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_features)
    }

    pub fn is_quantized(&self) -> bool {
        self.input.is_some()
    }

    /// Data type of the activations entering layer `l`.
    pub fn input_dtype(&self, l: usize) -> Option<DType> {
        if l == 0 {
            self.input.map(|q| q.dtype)
        } else {
            self.layers[l - 1].activation.quant.map(|q| q.dtype)
        }
    }

    pub fn input_scale(&self, l: usize) -> f64 {
        let q = if l == 0 { self.input } else { self.layers[l - 1].activation.quant };
        q.map_or(1.0, |q| q.scale())
    }

    /// Accumulator constraint of layer `l`, when it is a `wnq` layer.
    pub fn constraint(&self, l: usize) -> Result<Option<AccumConstraint>> {
        let layer = &self.layers[l];
        if layer.spec.kind != QuantizerKind::Wnq {
            return Ok(None);
        }
        let p = layer.spec.p_star.ok_or_else(|| Error::Model(format!("layer {l}: wnq layer without p_star")))?;
        let input = self.input_dtype(l).ok_or_else(|| Error::Model(format!("layer {l}: wnq layer needs a quantized input")))?;
        AccumConstraint::new(p, input).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        let quantized = self.is_quantized();
        if let Some(q) = &self.input {
            q.validate()?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let spec = &layer.spec;
            let ctx = |msg: String| Error::Model(format!("layer {l}: {msg}"));
            if l > 0 && self.layers[l - 1].spec.out_features != spec.in_features {
                return Err(ctx(format!(
                    "in_features {} does not match previous out_features {}",
                    spec.in_features,
                    self.layers[l - 1].spec.out_features
                )));
            }
            if spec.in_features == 0 || spec.out_features == 0 {
                return Err(ctx("empty layer".into()));
            }
            if layer.weights.kind() != spec.kind {
                return Err(ctx(format!("parameters are {:?}, spec says {:?}", layer.weights.kind(), spec.kind)));
            }
            if (spec.kind == QuantizerKind::Float) == quantized {
                return Err(ctx("float and quantized layers cannot be mixed".into()));
            }
            let n = spec.in_features * spec.out_features;
            let c = spec.out_features;
            let ok = match &layer.weights {
                Weights::Float { w } => w.len() == n,
                Weights::Baseline { w, d } => w.len() == n && d.len() == c,
                Weights::Wnq { v, t, d } => v.len() == n && t.len() == c && d.len() == c,
            };
            if !ok || layer.bias.len() != c {
                return Err(ctx("parameter lengths do not match the layer shape".into()));
            }
            match (&layer.activation.quant, quantized) {
                (Some(q), true) => {
                    q.validate()?;
                    if q.dtype != spec.act_dtype()? {
                        return Err(ctx(format!("activation quantizer {} does not match spec", q.dtype)));
                    }
                }
                (None, false) => {}
                _ => return Err(ctx("activation quantizer presence must match the model".into())),
            }
            if quantized {
                spec.weight_dtype()?;
            }
            self.constraint(l)?;
        }
        Ok(())
    }

    /// Codes and scales of layer `l`.
    pub fn effective_weights(&self, l: usize, rounding: Rounding) -> Result<EffectiveWeights> {
        let layer = &self.layers[l];
        let (k, c) = (layer.k(), layer.channels());
        match &layer.weights {
            Weights::Float { w } => {
                Ok(EffectiveWeights { codes: w.clone(), scales: vec![1.0; c], inside: vec![true; w.len()], traces: None })
            }
            Weights::Baseline { w, d } => {
                let dtype = layer.spec.weight_dtype()?;
                let (n, p) = (dtype.min() as f64, dtype.max() as f64);
                let scales: Vec<f64> = d.iter().map(|d| d.exp2()).collect();
                let mut codes = Vec::with_capacity(w.len());
                let mut inside = Vec::with_capacity(w.len());
                for (i, row) in w.chunks(k).enumerate() {
                    for &x in row {
                        let z = x / scales[i];
                        let r = match rounding {
                            Rounding::Quantized => z.round_ties_even(),
                            Rounding::Relaxed => z,
                        };
                        codes.push(r.clamp(n, p));
                        inside.push(z >= n && z <= p);
                    }
                }
                Ok(EffectiveWeights { codes, scales, inside, traces: None })
            }
            Weights::Wnq { v, t, d } => {
                let dtype = layer.spec.weight_dtype()?;
                let constraint = self.constraint(l)?.expect("wnq layer has a constraint");
                let mut codes = Vec::with_capacity(v.len());
                let mut inside = Vec::with_capacity(v.len());
                let mut scales = Vec::with_capacity(c);
                let mut traces = Vec::with_capacity(c);
                for i in 0..c {
                    let tr = trace_channel(&v[i * k..(i + 1) * k], t[i], d[i], &constraint, dtype, rounding, i)?;
                    codes.extend_from_slice(&tr.codes);
                    inside.extend_from_slice(&tr.inside);
                    scales.push(tr.scale);
                    traces.push(tr);
                }
                Ok(EffectiveWeights { codes, scales, inside, traces: Some(traces) })
            }
        }
    }

    /// Integer weights `[out_features, in_features]` of a quantized layer.
    pub fn integer_weights(&self, l: usize) -> Result<IntTensor> {
        let layer = &self.layers[l];
        if layer.spec.kind == QuantizerKind::Float {
            return Err(Error::Model(format!("layer {l} is not quantized")));
        }
        let eff = self.effective_weights(l, Rounding::Quantized)?;
        let data = eff.codes.iter().map(|&q| q as i64).collect();
        IntTensor::new(vec![layer.channels(), layer.k()], data, layer.spec.weight_dtype()?)
    }

    /// Per-channel log2 weight scales of a quantized layer.
    pub fn weight_log_scales(&self, l: usize) -> Option<&[f64]> {
        match &self.layers[l].weights {
            Weights::Float { .. } => None,
            Weights::Baseline { d, .. } | Weights::Wnq { d, .. } => Some(d),
        }
    }

    /// `(t, T)` pairs of every constrained channel, layer by layer.
    pub fn norm_params(&self) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if let (Weights::Wnq { t, d, .. }, Some(c)) = (&layer.weights, self.constraint(l)?) {
                out.extend(t.iter().zip(d).map(|(&t, &d)| (t, wnq::cap_t(&c, d))));
            }
        }
        Ok(out)
    }

    /// Coarsens the weight grid of every channel whose norm exceeds its cap:
    /// `d` rises by `t - T`, so the channel sits exactly at its cap with the
    /// same real-valued norm `2^t`, and the penalty becomes zero.
    pub fn fit_scales_to_caps(&mut self) -> Result<()> {
        for l in 0..self.layers.len() {
            let Some(c) = self.constraint(l)? else { continue };
            if let Weights::Wnq { t, d, .. } = &mut self.layers[l].weights {
                for (&t, d) in t.iter().zip(d.iter_mut()) {
                    let excess = t - wnq::cap_t(&c, *d);
                    if excess > 0.0 {
                        *d += excess;
                    }
                }
            }
        }
        Ok(())
    }

    /// Lagrangian penalty `sum (t - T)_+` over all constrained channels.
    pub fn penalty(&self) -> Result<f64> {
        let (t, caps): (Vec<f64>, Vec<f64>) = self.norm_params()?.into_iter().unzip();
        wnq::penalty(&t, &caps)
    }
}

/// Architecture description used to build models.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub in_features: usize,
    pub hidden: Vec<usize>,
    pub out_features: usize,
    pub kind: QuantizerKind,
    /// Weight bits of hidden layers.
    pub weight_bits: u32,
    /// Activation bits of hidden activations.
    pub act_bits: u32,
    /// Bits of the input, first-layer weights, last-layer weights and output.
    pub edge_bits: u32,
    pub p_star: Option<u32>,
    /// Per-layer accumulator target overrides (`None` entries keep `p_star`).
    pub p_star_overrides: Vec<Option<u32>>,
}

impl Architecture {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut dims = vec![self.in_features];
        dims.extend(&self.hidden);
        dims.push(self.out_features);
        let last = dims.len() - 2;
        (0..=last)
            .map(|l| {
                let is_last = l == last;
                let weight_bits = if l == 0 || is_last { self.edge_bits } else { self.weight_bits };
                let act_bits = if is_last { self.edge_bits } else { self.act_bits };
                let p_star = match self.kind {
                    QuantizerKind::Wnq => self.p_star_overrides.get(l).copied().flatten().or(self.p_star),
                    _ => None,
                };
                LayerSpec {
                    in_features: dims[l],
                    out_features: dims[l + 1],
                    weight_bits,
                    act_bits,
                    act_signed: is_last,
                    kind: self.kind,
                    p_star,
                }
            })
            .collect()
    }

    pub fn input_dtype(&self) -> Result<DType> {
        DType::signed(self.edge_bits)
    }
}

/// Float model with He-normal weights and zero biases.
pub fn init_float<R: Rng>(arch: &Architecture, rng: &mut R) -> Model {
    let layers = arch
        .layer_specs()
        .into_iter()
        .enumerate()
        .map(|(l, mut spec)| {
            spec.kind = QuantizerKind::Float;
            spec.p_star = None;
            let std = (2.0 / spec.in_features as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = (0..spec.in_features * spec.out_features).map(|_| normal.sample(rng)).collect();
            let is_last = l == arch.hidden.len();
            let c = spec.out_features;
            DenseLayer {
                spec,
                weights: Weights::Float { w },
                bias: vec![0.0; c],
                activation: Activation { relu: !is_last, quant: None },
            }
        })
        .collect();
    Model { input: None, layers }
}

/// Converts a trained float model into a quantized one.
///
/// `ranges[0]` is the largest input magnitude and `ranges[l + 1]` the largest
/// post-activation magnitude of layer `l`, both measured on calibration data.
/// Activation scales map those ranges onto the integer grid.
pub fn quantize_from_float(float: &Model, arch: &Architecture, ranges: &[f64]) -> Result<Model> {
    let specs = arch.layer_specs();
    if specs.len() != float.layers.len() || ranges.len() != specs.len() + 1 {
        return Err(Error::Model("float model does not match the architecture".into()));
    }
    let log_scale = |range: f64, dtype: DType| -> f64 {
        if range > 0.0 && range.is_finite() {
            (range / dtype.max() as f64).log2()
        } else {
            0.0
        }
    };
    let input_dtype = arch.input_dtype()?;
    let input = QuantSpec::symmetric(log_scale(ranges[0], input_dtype), input_dtype);
    let mut layers = Vec::with_capacity(specs.len());
    for (l, spec) in specs.into_iter().enumerate() {
        let src = &float.layers[l];
        let Weights::Float { w } = &src.weights else {
            return Err(Error::Model(format!("layer {l} of the source model is not float")));
        };
        let k = spec.in_features;
        let wdt = spec.weight_dtype()?;
        let weights = match spec.kind {
            QuantizerKind::Float => Weights::Float { w: w.clone() },
            QuantizerKind::Baseline => {
                let d = w
                    .chunks(k)
                    .map(|row| {
                        let m = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                        if m > 0.0 {
                            (m / wdt.max() as f64).log2()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Weights::Baseline { w: w.clone(), d }
            }
            QuantizerKind::Wnq => {
                let (mut v, mut t, mut d) = (Vec::new(), Vec::new(), Vec::new());
                for row in w.chunks(k) {
                    let p = wnq::init_from_float(row, wdt);
                    v.extend(p.v);
                    t.push(p.t);
                    d.push(p.d);
                }
                Weights::Wnq { v, t, d }
            }
        };
        let act_dtype = spec.act_dtype()?;
        let quant = QuantSpec::symmetric(log_scale(ranges[l + 1], act_dtype), act_dtype);
        layers.push(DenseLayer {
            weights,
            bias: src.bias.clone(),
            activation: Activation { relu: src.activation.relu, quant: Some(quant) },
            spec,
        });
    }
    let model = Model { input: Some(input), layers };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(kind: QuantizerKind) -> Architecture {
        Architecture {
            in_features: 4,
            hidden: vec![6, 5],
            out_features: 3,
            kind,
            weight_bits: 5,
            act_bits: 6,
            edge_bits: 8,
            p_star: Some(14),
            p_star_overrides: vec![None, Some(12)],
        }
    }

    #[test]
    fn edge_layers_use_edge_bits() {
        let specs = arch(QuantizerKind::Wnq).layer_specs();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs.iter().map(|s| s.weight_bits).collect::<Vec<_>>(), vec![8, 5, 8]);
        assert_eq!(specs.iter().map(|s| s.act_bits).collect::<Vec<_>>(), vec![6, 6, 8]);
        assert_eq!(specs.iter().map(|s| s.act_signed).collect::<Vec<_>>(), vec![false, false, true]);
        assert_eq!(specs.iter().map(|s| s.p_star).collect::<Vec<_>>(), vec![Some(14), Some(12), Some(14)]);
    }

    #[test]
    fn quantized_model_validates_and_chains_dtypes() {
        let a = arch(QuantizerKind::Wnq);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = init_float(&a, &mut rng);
        f.validate().unwrap();
        let q = quantize_from_float(&f, &a, &[2.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(q.input_dtype(0), Some(DType::signed(8).unwrap()));
        assert_eq!(q.input_dtype(1), Some(DType::unsigned(6).unwrap()));
        let c = q.constraint(1).unwrap().unwrap();
        assert_eq!((c.p_star, c.input), (12, DType::unsigned(6).unwrap()));
        for l in 0..3 {
            let w = q.integer_weights(l).unwrap();
            assert_eq!(w.shape(), &[q.layers[l].channels(), q.layers[l].k()]);
        }
        assert!(q.penalty().unwrap() >= 0.0);
    }

    #[test]
    fn fitting_scales_removes_the_penalty() {
        let a = arch(QuantizerKind::Wnq);
        let f = init_float(&a, &mut ChaCha8Rng::seed_from_u64(2));
        let mut q = quantize_from_float(&f, &a, &[2.0, 3.0, 3.0, 5.0]).unwrap();
        assert!(q.penalty().unwrap() > 0.0);
        let before: Vec<f64> = q.norm_params().unwrap().iter().map(|p| p.0).collect();
        q.fit_scales_to_caps().unwrap();
        let after = q.norm_params().unwrap();
        assert!(q.penalty().unwrap() <= 1e-9);
        for ((t, cap), t0) in after.iter().zip(&before) {
            assert_eq!(t, t0);
            assert!((t - cap).abs() < 1e-9 || t < cap);
        }
    }

    #[test]
    fn validation_catches_shape_errors() {
        let a = arch(QuantizerKind::Baseline);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = init_float(&a, &mut rng);
        let mut q = quantize_from_float(&f, &a, &[1.0; 4]).unwrap();
        q.layers[1].bias.pop();
        assert!(q.validate().is_err());
    }
}
