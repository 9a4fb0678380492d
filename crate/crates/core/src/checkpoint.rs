//! Versioned JSON checkpoints.
//!
//! Keys are written in sorted order and reals as shortest round-trip decimal
//! strings, so loading and re-saving a checkpoint reproduces it byte for
//! byte. Loading validates the model and re-derives every integer weight.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{weight_bound, BoundResult};
use crate::error::{Error, Result};
use crate::infer::{AccMode, AccumulatorSpec, IntModel};
use crate::model::{Model, QuantizerKind};
use crate::qcore::IntTensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the canonical training configuration.
    pub config_hash: String,
    pub seed: u64,
}

/// Integer-side data stored next to each layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub accumulator: AccumulatorSpec,
    /// Integer weights, one row per output channel.
    pub weights_int: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub provenance: Provenance,
    pub model: Model,
    pub layers: Vec<LayerRecord>,
}

fn rows(w: &IntTensor) -> Vec<Vec<i64>> {
    w.data().chunks(w.shape()[1]).map(|r| r.to_vec()).collect()
}

/// Per-channel weight bounds of layer `l`.
pub fn layer_weight_bounds(model: &Model, l: usize) -> Result<Vec<BoundResult>> {
    let w = model.integer_weights(l)?;
    let input = model.input_dtype(l).ok_or_else(|| Error::Model(format!("layer {l} has no quantized input")))?;
    w.data()
        .chunks(w.shape()[1])
        .map(|row| weight_bound(&IntTensor::from_vec(row.to_vec(), w.dtype())?, input))
        .collect()
}

/// Default accumulator of layer `l`: `P*` for constrained layers, otherwise
/// the largest per-channel weight bound.
pub fn default_accumulator(model: &Model, l: usize) -> Result<AccumulatorSpec> {
    let bits = match (model.layers[l].spec.kind, model.layers[l].spec.p_star) {
        (QuantizerKind::Wnq, Some(p)) => p,
        _ => layer_weight_bounds(model, l)?.iter().map(|b| b.min_bits).max().unwrap_or(2),
    };
    AccumulatorSpec::new(bits.max(2), AccMode::Wraparound)
}

impl ModelCheckpoint {
    /// Builds a checkpoint of a quantized model with default accumulators.
    pub fn new(model: Model, provenance: Provenance) -> Result<Self> {
        let accs = (0..model.layers.len()).map(|l| default_accumulator(&model, l)).collect::<Result<Vec<_>>>()?;
        Self::with_accumulators(model, provenance, accs)
    }

    pub fn with_accumulators(model: Model, provenance: Provenance, accs: Vec<AccumulatorSpec>) -> Result<Self> {
        model.validate()?;
        if !model.is_quantized() {
            return Err(Error::Checkpoint("checkpoints hold quantized models only".into()));
        }
        if accs.len() != model.layers.len() {
            return Err(Error::LengthMismatch { left: accs.len(), right: model.layers.len() });
        }
        let layers = accs
            .into_iter()
            .enumerate()
            .map(|(l, accumulator)| Ok(LayerRecord { accumulator, weights_int: rows(&model.integer_weights(l)?) }))
            .collect::<Result<Vec<_>>>()?;
        let ck = Self { format_version: FORMAT_VERSION, provenance, model, layers };
        ck.validate()?;
        Ok(ck)
    }

    pub fn accumulators(&self) -> Vec<AccumulatorSpec> {
        self.layers.iter().map(|r| r.accumulator).collect()
    }

    pub fn int_model(&self) -> Result<IntModel> {
        IntModel::from_model(&self.model, &self.accumulators())
    }

    /// Checks the version, the model, the stored integer weights and every
    /// constrained channel's l1 budget.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Checkpoint(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {} (expected {FORMAT_VERSION})", self.format_version));
        }
        self.model.validate().map_err(|e| Error::Checkpoint(format!("model: {e}")))?;
        if !self.model.is_quantized() {
            return bad("model is not quantized".into());
        }
        if self.layers.len() != self.model.layers.len() {
            return bad(format!("{} layer records for {} layers", self.layers.len(), self.model.layers.len()));
        }
        for (l, rec) in self.layers.iter().enumerate() {
            AccumulatorSpec::new(rec.accumulator.bits, rec.accumulator.mode)
                .map_err(|e| Error::Checkpoint(format!("layer {l}: {e}")))?;
            let w = self.model.integer_weights(l)?;
            if rows(&w) != rec.weights_int {
                return bad(format!("layer {l}: weights_int do not match the quantized parameters"));
            }
            if let Some(c) = self.model.constraint(l)? {
                let budget = c.budget_floor();
                for (i, row) in rec.weights_int.iter().enumerate() {
                    let l1: u128 = row.iter().map(|v| v.unsigned_abs() as u128).sum();
                    if l1 > budget {
                        return bad(format!("layer {l} channel {i}: l1 norm {l1} exceeds budget {budget}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON text, newline-terminated.
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Pretty JSON with sorted keys, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Reads a UTF-8 file; errors name the path.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
