//! Closed-form worst-case inputs for accumulator overflow.
//!
//! Choosing every input so that all products share one sign makes the
//! running sum monotone, so the final sum is the extreme partial sum in that
//! direction. Each layer is attacked through its own integer interface over
//! the full input range; upstream layers are bypassed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds::bits_for_magnitude;
use crate::infer::{dot_acc, AccMode, IntModel};
use crate::par::{self, Exec};
use crate::qcore::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Positive,
    Negative,
}

/// Input maximizing `sum x_i w_i` (positive) or minimizing it (negative).
pub fn sign_aligned_input(w: &[i64], input: DType, direction: Direction) -> Vec<i64> {
    assert!(!w.is_empty(), "attack on an empty weight vector");
    let (lo, hi) = (input.min(), input.max());
    w.iter()
        .map(|&wi| {
            let want_positive = (wi > 0) == (direction == Direction::Positive);
            match (wi == 0, want_positive) {
                (true, _) => 0,
                (false, true) => hi,
                (false, false) => lo,
            }
        })
        .collect()
}

/// Worst case found for one neuron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackResult {
    pub layer: usize,
    pub neuron: usize,
    /// Input that reached the peak.
    pub input: Vec<i64>,
    pub direction: Direction,
    /// Largest exact partial-sum magnitude.
    pub peak: u128,
    /// `ceil(log2(peak + 1)) + 1`.
    pub required_bits: u32,
    pub overflowed: bool,
    pub overflows: u64,
    pub worst_excursion: u128,
    pub macs: u64,
}

/// Largest partial-sum magnitude reachable by sign-aligned inputs, with the
/// input that reaches it.
pub fn neuron_peak(w: &[i64], input: DType) -> (Direction, Vec<i64>, u128) {
    let mut best = (Direction::Positive, Vec::new(), 0u128);
    for dir in [Direction::Positive, Direction::Negative] {
        let x = sign_aligned_input(w, input, dir);
        let exact: i128 = x.iter().zip(w).map(|(a, b)| (*a as i128) * (*b as i128)).sum();
        if best.1.is_empty() || exact.unsigned_abs() > best.2 {
            best = (dir, x, exact.unsigned_abs());
        }
    }
    best
}

/// Attacks every neuron of every layer at the layer's accumulator width.
/// Accumulation is emulated in wraparound mode.
pub fn attack_model(model: &IntModel, exec: Exec) -> Vec<AttackResult> {
    let jobs: Vec<(usize, usize)> =
        model.layers.iter().enumerate().flat_map(|(l, layer)| (0..layer.channels()).map(move |i| (l, i))).collect();
    par::map(exec, &jobs, |&(l, i)| {
        let layer = &model.layers[l];
        let spec = layer.acc.with_mode(AccMode::Wraparound);
        let w = layer.row(i);
        let (mut overflows, mut worst, mut macs) = (0, 0, 0);
        for dir in [Direction::Positive, Direction::Negative] {
            let st = dot_acc(&sign_aligned_input(w, layer.input_dtype, dir), w, spec, None);
            overflows += st.overflows;
            worst = worst.max(st.worst_excursion);
            macs += st.macs;
        }
        let (direction, input, peak) = neuron_peak(w, layer.input_dtype);
        AttackResult {
            layer: l,
            neuron: i,
            input,
            direction,
            peak,
            required_bits: bits_for_magnitude(peak),
            overflowed: overflows > 0,
            overflows,
            worst_excursion: worst,
            macs,
        }
    })
}

pub fn total_overflows(results: &[AttackResult]) -> u64 {
    results.iter().map(|r| r.overflows).sum()
}

/// Per-layer overflow counts of an attack.
pub fn layer_overflows(model: &IntModel, results: &[AttackResult]) -> Vec<u64> {
    let mut out = vec![0; model.layers.len()];
    for r in results {
        out[r.layer] += r.overflows;
    }
    out
}

pub fn attack_json(results: &[AttackResult]) -> serde_json::Value {
    serde_json::json!({
        "rows": results,
        "total_overflows": total_overflows(results),
    })
}

/// Random-input fuzzing of one neuron, layer-local.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzResult {
    pub layer: usize,
    pub neuron: usize,
    pub peak: u128,
    pub overflows: u64,
}

/// Feeds `samples` uniformly random full-range inputs to every layer.
/// Deterministic in `seed` regardless of `exec`.
pub fn fuzz_layers(model: &IntModel, samples: usize, seed: u64, exec: Exec) -> Vec<FuzzResult> {
    let per_layer = par::map_range(exec, model.layers.len(), |l| {
        let layer = &model.layers[l];
        let spec = layer.acc.with_mode(AccMode::Wraparound);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((l as u64 + 1) << 32));
        let dt = layer.input_dtype;
        let mut res: Vec<FuzzResult> = (0..layer.channels())
            .map(|neuron| FuzzResult { layer: l, neuron, peak: 0, overflows: 0 })
            .collect();
        let mut x = vec![0i64; layer.k()];
        for _ in 0..samples {
            x.iter_mut().for_each(|v| *v = rng.gen_range(dt.min()..=dt.max()));
            for (i, r) in res.iter_mut().enumerate() {
                let st = dot_acc(&x, layer.row(i), spec, None);
                r.peak = r.peak.max(st.peak);
                r.overflows += st.overflows;
            }
        }
        res
    });
    per_layer.into_iter().flatten().collect()
}
