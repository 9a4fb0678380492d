//! Sparsity, entropy and compressibility of integer weight tensors.
//!
//! The compression rate is an estimate: stored bits per element divided by
//! the Shannon entropy of the integer values, i.e. the ratio an ideal
//! entropy coder could reach. It is infinite for constant tensors.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::model::Model;
use crate::qcore::IntTensor;

pub fn sparsity(w: &IntTensor) -> f64 {
    assert!(!w.is_empty(), "sparsity of an empty tensor");
    w.data().iter().filter(|&&v| v == 0).count() as f64 / w.len() as f64
}

fn histogram(values: &[i64]) -> BTreeMap<i64, usize> {
    let mut h = BTreeMap::new();
    for &v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

/// Shannon entropy in bits per element of the empirical value distribution.
pub fn entropy(w: &IntTensor) -> f64 {
    assert!(!w.is_empty(), "entropy of an empty tensor");
    let n = w.len() as f64;
    let h: f64 = histogram(w.data())
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn compression_rate_from_entropy(entropy_bits: f64, bits: u32) -> f64 {
    if entropy_bits <= 0.0 {
        f64::INFINITY
    } else {
        bits as f64 / entropy_bits
    }
}

/// `M / entropy`, infinite when the entropy is zero.
pub fn compression_rate(w: &IntTensor, bits: u32) -> f64 {
    compression_rate_from_entropy(entropy(w), bits)
}

/// Formats a compression rate, writing `infinite` for the unbounded case.
pub fn format_rate(rate: f64) -> String {
    if rate.is_infinite() {
        "infinite".to_string()
    } else {
        format!("{rate:.6}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionStats {
    pub layer: String,
    pub elements: usize,
    pub weight_bits: u32,
    pub sparsity: f64,
    pub entropy_bits: f64,
    pub compression_rate: f64,
}

/// Per-layer statistics followed by a size-weighted `model` row.
pub fn model_stats(model: &Model) -> Result<Vec<CompressionStats>> {
    let mut rows = Vec::with_capacity(model.layers.len() + 1);
    let (mut n, mut zeros, mut ent, mut bits) = (0usize, 0.0, 0.0, 0.0);
    for l in 0..model.layers.len() {
        let w = model.integer_weights(l)?;
        let m = model.layers[l].spec.weight_bits;
        let (s, h) = (sparsity(&w), entropy(&w));
        n += w.len();
        zeros += s * w.len() as f64;
        ent += h * w.len() as f64;
        bits += m as f64 * w.len() as f64;
        rows.push(CompressionStats {
            layer: l.to_string(),
            elements: w.len(),
            weight_bits: m,
            sparsity: s,
            entropy_bits: h,
            compression_rate: compression_rate_from_entropy(h, m),
        });
    }
    let h = ent / n as f64;
    let mean_bits = bits / n as f64;
    rows.push(CompressionStats {
        layer: "model".into(),
        elements: n,
        weight_bits: mean_bits.round() as u32,
        sparsity: zeros / n as f64,
        entropy_bits: h,
        compression_rate: if h <= 0.0 { f64::INFINITY } else { mean_bits / h },
    });
    Ok(rows)
}

/// Ranks with ties averaged, 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
