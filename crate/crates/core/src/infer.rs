//! Bit-accurate integer inference with emulated `P`-bit accumulators.
//!
//! Each dot product is a chain of [`acc_step`] calls in a fixed order.
//! Biases stay out of the accumulator: the exact accumulator value is
//! dequantized with `s_x * s_w`, biased, passed through the activation and
//! requantized to the next activation grid in double precision, exactly as
//! the fake-quantized training forward pass does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{self, Exec};
use crate::qcore::{quantize_value, DType, IntTensor, QuantSpec, RoundingMode};
use crate::train::forward;
use crate::wnq::Rounding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccMode {
    Wraparound,
    Saturate,
    /// Exact 64-bit reference; overflows are still flagged against `P`.
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatorSpec {
    pub bits: u32,
    pub mode: AccMode,
}

impl AccumulatorSpec {
    pub fn new(bits: u32, mode: AccMode) -> Result<Self> {
        if !(2..=64).contains(&bits) {
            return Err(Error::InvalidAccumulator(bits));
        }
        Ok(Self { bits, mode })
    }

    pub fn min(&self) -> i128 {
        -(1i128 << (self.bits - 1))
    }

    pub fn max(&self) -> i128 {
        (1i128 << (self.bits - 1)) - 1
    }

    pub fn with_mode(self, mode: AccMode) -> Self {
        Self { mode, ..self }
    }
}

/// Distance of `v` outside `[lo, hi]`, 0 inside.
#[inline]
fn excursion(v: i128, lo: i128, hi: i128) -> u128 {
    if v > hi {
        (v - hi) as u128
    } else if v < lo {
        (lo - v) as u128
    } else {
        0
    }
}

/// Adds `product` to the register `acc`. Returns the new register value and
/// whether the exact sum left the `P`-bit range.
#[inline]
pub fn acc_step(acc: i64, product: i64, spec: AccumulatorSpec) -> (i64, bool) {
    let exact = acc as i128 + product as i128;
    let (lo, hi) = (spec.min(), spec.max());
    let overflow = exact < lo || exact > hi;
    let next = match spec.mode {
        AccMode::Wide => exact.clamp(i64::MIN as i128, i64::MAX as i128),
        AccMode::Saturate => exact.clamp(lo, hi),
        AccMode::Wraparound => {
            let m = 1i128 << spec.bits;
            (exact - lo).rem_euclid(m) + lo
        }
    };
    (next as i64, overflow)
}

/// Outcome of one accumulated dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DotStats {
    /// Final register value.
    pub value: i64,
    /// Exact sum of all products.
    pub exact: i128,
    pub overflows: u64,
    /// Largest distance of any flagged sum outside the range.
    pub worst_excursion: u128,
    /// Largest exact partial-sum magnitude.
    pub peak: u128,
    pub macs: u64,
}

/// Accumulates `x . w` through `spec`, in index order or in `order`.
pub fn dot_acc(x: &[i64], w: &[i64], spec: AccumulatorSpec, order: Option<&[usize]>) -> DotStats {
    debug_assert_eq!(x.len(), w.len());
    let (lo, hi) = (spec.min(), spec.max());
    let mut st = DotStats::default();
    let mut step = |j: usize| {
        let product = x[j] * w[j];
        let (next, flag) = acc_step(st.value, product, spec);
        if flag {
            st.overflows += 1;
            st.worst_excursion = st.worst_excursion.max(excursion(st.value as i128 + product as i128, lo, hi));
        }
        st.value = next;
        st.exact += product as i128;
        st.peak = st.peak.max(st.exact.unsigned_abs());
        st.macs += 1;
    };
    match order {
        Some(o) => o.iter().for_each(|&j| step(j)),
        None => (0..x.len()).for_each(&mut step),
    }
    st
}

/// One layer of the integer pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct IntLayer {
    /// `[out_features, in_features]`.
    pub weights: IntTensor,
    pub weight_scales: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
    pub input_dtype: DType,
    pub input_scale: f64,
    pub output: QuantSpec,
    pub acc: AccumulatorSpec,
}

impl IntLayer {
    pub fn k(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn row(&self, i: usize) -> &[i64] {
        let k = self.k();
        &self.weights.data()[i * k..(i + 1) * k]
    }

    /// Wide requantization of one accumulator value for channel `i`.
    #[inline]
    pub fn requantize(&self, acc: i64, i: usize) -> i64 {
        let mut y = acc as f64 * (self.input_scale * self.weight_scales[i]) + self.bias[i];
        if self.relu {
            y = y.max(0.0);
        }
        quantize_value(y, self.output.scale(), self.output.z, self.output.dtype, RoundingMode::HalfEven)
    }
}

/// A quantized model reduced to integer weights, scales and accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct IntModel {
    pub input: QuantSpec,
    pub layers: Vec<IntLayer>,
}

impl IntModel {
    /// Extracts the integer view of `model` with one accumulator per layer.
    pub fn from_model(model: &Model, accs: &[AccumulatorSpec]) -> Result<Self> {
        model.validate()?;
        let input = model.input.ok_or_else(|| Error::Model("integer inference needs a quantized model".into()))?;
        if accs.len() != model.layers.len() {
            return Err(Error::LengthMismatch { left: accs.len(), right: model.layers.len() });
        }
        let mut layers = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            let eff = model.effective_weights(l, Rounding::Quantized)?;
            layers.push(IntLayer {
                weights: model.integer_weights(l)?,
                weight_scales: eff.scales,
                bias: layer.bias.clone(),
                relu: layer.activation.relu,
                input_dtype: model.input_dtype(l).expect("validated quantized model"),
                input_scale: model.input_scale(l),
                output: layer.activation.quant.expect("validated quantized model"),
                acc: AccumulatorSpec::new(accs[l].bits, accs[l].mode)?,
            });
        }
        Ok(Self { input, layers })
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].k()
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels())
    }

    pub fn set_accumulators(&mut self, spec: impl Fn(usize, AccumulatorSpec) -> AccumulatorSpec) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.acc = spec(l, layer.acc);
        }
    }

    /// Input codes for real features, half-even rounded.
    pub fn quantize_input(&self, x: &[f64]) -> Result<IntTensor> {
        let k = self.in_features();
        if x.len() % k != 0 {
            return Err(Error::Shape { expected: format!("rows of {k}"), got: format!("{} values", x.len()) });
        }
        crate::qcore::quantize(x, vec![x.len() / k, k], &self.input, RoundingMode::HalfEven)
    }

    /// Real outputs for output codes.
    pub fn dequantize_output(&self, codes: &IntTensor) -> Result<Vec<f64>> {
        crate::qcore::dequantize(codes, &self.layers.last().expect("nonempty").output)
    }
}

/// Per-neuron overflow statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeuronReport {
    pub layer: usize,
    pub neuron: usize,
    pub overflows: u64,
    pub worst_excursion: u128,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct OverflowReport {
    pub rows: Vec<NeuronReport>,
}

impl OverflowReport {
    fn empty(model: &IntModel) -> Self {
        let rows = model
            .layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| {
                (0..l.channels()).map(move |neuron| NeuronReport { layer, neuron, overflows: 0, worst_excursion: 0, macs: 0 })
            })
            .collect();
        Self { rows }
    }

    pub fn total_overflows(&self) -> u64 {
        self.rows.iter().map(|r| r.overflows).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Overflow count per layer.
    pub fn layer_overflows(&self) -> Vec<u64> {
        let layers = self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let mut out = vec![0; layers];
        for r in &self.rows {
            out[r.layer] += r.overflows;
        }
        out
    }

    /// Sums counts and keeps the worst excursion. Both reports must cover
    /// the same neurons.
    pub fn merge(&mut self, other: &OverflowReport) {
        assert_eq!(self.rows.len(), other.rows.len(), "reports cover different models");
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            a.overflows += b.overflows;
            a.worst_excursion = a.worst_excursion.max(b.worst_excursion);
            a.macs += b.macs;
        }
    }

    fn add(&mut self, idx: usize, st: &DotStats) {
        let r = &mut self.rows[idx];
        r.overflows += st.overflows;
        r.worst_excursion = r.worst_excursion.max(st.worst_excursion);
        r.macs += st.macs;
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "total_overflows": self.total_overflows(),
        })
    }
}

/// Accumulator values and requantized codes of one layer for one sample.
pub fn layer_int(layer: &IntLayer, x: &[i64], order: Option<&[usize]>) -> (Vec<i64>, Vec<i64>, Vec<DotStats>) {
    let c = layer.channels();
    let mut accs = Vec::with_capacity(c);
    let mut codes = Vec::with_capacity(c);
    let mut stats = Vec::with_capacity(c);
    for i in 0..c {
        let st = dot_acc(x, layer.row(i), layer.acc, order);
        accs.push(st.value);
        codes.push(layer.requantize(st.value, i));
        stats.push(st);
    }
    (accs, codes, stats)
}

/// Accumulation order per layer; `None` means index order.
pub type Orders<'a> = Option<&'a [Vec<usize>]>;

fn run_sample(model: &IntModel, x: &[i64], orders: Orders) -> (Vec<i64>, Vec<DotStats>) {
    let mut codes = x.to_vec();
    let mut stats = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let order = orders.map(|o| o[l].as_slice());
        let (_, next, st) = layer_int(layer, &codes, order);
        stats.extend(st);
        codes = next;
    }
    (codes, stats)
}

fn check_input(model: &IntModel, x: &IntTensor, orders: Orders) -> Result<usize> {
    let k = model.in_features();
    if x.dtype() != model.input.dtype {
        return Err(Error::DTypeMismatch { expected: model.input.dtype, got: x.dtype() });
    }
    if x.shape().len() != 2 || x.shape()[1] != k {
        return Err(Error::Shape { expected: format!("[batch, {k}]"), got: format!("{:?}", x.shape()) });
    }
    for (l, layer) in model.layers.iter().enumerate() {
        if l > 0 && model.layers[l - 1].output.dtype != layer.input_dtype {
            return Err(Error::DTypeMismatch { expected: layer.input_dtype, got: model.layers[l - 1].output.dtype });
        }
        if let Some(o) = orders {
            let mut seen = vec![false; layer.k()];
            let ok = o.get(l).is_some_and(|p| p.len() == layer.k() && p.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true)));
            if !ok {
                return Err(Error::Shape { expected: format!("permutation of 0..{} for layer {l}", layer.k()), got: "other".into() });
            }
        }
    }
    Ok(x.shape()[0])
}

/// Runs a batch `[batch, in_features]` through the integer pipeline.
pub fn run_int(model: &IntModel, x: &IntTensor, exec: Exec) -> Result<(IntTensor, OverflowReport)> {
    run_int_ordered(model, x, None, exec)
}

/// [`run_int`] with an explicit accumulation order per layer.
pub fn run_int_ordered(model: &IntModel, x: &IntTensor, orders: Orders, exec: Exec) -> Result<(IntTensor, OverflowReport)> {
    let batch = check_input(model, x, orders)?;
    let k = model.in_features();
    let per_sample = par::map_range(exec, batch, |b| run_sample(model, &x.data()[b * k..(b + 1) * k], orders));
    let mut report = OverflowReport::empty(model);
    let c = model.out_features();
    let mut out = Vec::with_capacity(batch * c);
    for (codes, stats) in &per_sample {
        out.extend_from_slice(codes);
        for (idx, st) in stats.iter().enumerate() {
            report.add(idx, st);
        }
    }
    let out_dtype = model.layers.last().expect("nonempty").output.dtype;
    Ok((IntTensor::new(vec![batch, c], out, out_dtype)?, report))
}

/// True when wide-mode integer execution of `int` reproduces the fake-quant
/// forward pass of `model` on real inputs `x` bit for bit.
pub fn equivalence_check_with(model: &Model, int: &IntModel, x: &[f64], exec: Exec) -> Result<bool> {
    let mut wide = int.clone();
    wide.set_accumulators(|_, a| a.with_mode(AccMode::Wide));
    let codes = wide.quantize_input(x)?;
    let batch = codes.shape()[0];
    let (out, _) = run_int(&wide, &codes, exec)?;
    let ints = wide.dequantize_output(&out)?;
    let fake = forward(model, x, batch, Rounding::Quantized)?.outputs;
    Ok(ints.len() == fake.len() && ints.iter().zip(&fake).all(|(a, b)| a.to_bits() == b.to_bits()))
}

pub fn equivalence_check(model: &Model, x: &[f64], exec: Exec) -> Result<bool> {
    let accs = vec![AccumulatorSpec { bits: 64, mode: AccMode::Wide }; model.layers.len()];
    let int = IntModel::from_model(model, &accs)?;
    equivalence_check_with(model, &int, x, exec)
}
