//! Experiment configuration and the end-to-end training pipeline.
//!
//! A run pretrains a float network, calibrates activation ranges on the
//! training set, converts it to the configured quantizer, coarsens weight
//! grids until every norm fits its cap, recalibrates and fine-tunes.
//! Everything downstream of the configuration is seeded by `seed`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{canonical_json, read_text, ModelCheckpoint, Provenance};
use crate::data::{DataSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{init_float, quantize_from_float, Architecture, Model, QuantizerKind};
use crate::train::{self, EpochMetrics, TrainConfig};
use crate::wnq::Rounding;

pub const CONFIG_VERSION: u32 = 1;

fn default_edge_bits() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub hidden: Vec<usize>,
    pub kind: QuantizerKind,
    pub weight_bits: u32,
    pub act_bits: u32,
    #[serde(default = "default_edge_bits")]
    pub edge_bits: u32,
    #[serde(default)]
    pub p_star: Option<u32>,
    #[serde(default)]
    pub p_star_overrides: Vec<Option<u32>>,
}

impl ArchitectureConfig {
    pub fn build(&self, in_features: usize, out_features: usize) -> Architecture {
        Architecture {
            in_features,
            hidden: self.hidden.clone(),
            out_features,
            kind: self.kind,
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            edge_bits: self.edge_bits,
            p_star: self.p_star,
            p_star_overrides: self.p_star_overrides.clone(),
        }
    }
}

/// Output file names, resolved against the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint: "checkpoint.json".into(), metrics: "metrics.csv".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    pub architecture: ArchitectureConfig,
    /// Float pretraining before quantization.
    pub pretrain: TrainConfig,
    /// Quantization-aware fine-tuning.
    pub train: TrainConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// SHA-256 hex digest of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.format_version != CONFIG_VERSION {
            return bad(format!("unsupported format_version {} (expected {CONFIG_VERSION})", self.format_version));
        }
        self.pretrain.validate().map_err(|e| Error::Config(format!("pretrain.{}", strip(e))))?;
        self.train.validate().map_err(|e| Error::Config(format!("train.{}", strip(e))))?;
        let a = &self.architecture;
        match a.kind {
            QuantizerKind::Float => return bad("architecture.kind: must be baseline or wnq".into()),
            QuantizerKind::Wnq => {
                let hidden_layers = a.hidden.len() + 1;
                let all_set = (0..hidden_layers).all(|l| a.p_star_overrides.get(l).copied().flatten().or(a.p_star).is_some());
                if !all_set {
                    return bad("architecture.p_star: required for wnq layers".into());
                }
            }
            QuantizerKind::Baseline => {}
        }
        for (name, bits) in [("weight_bits", a.weight_bits), ("act_bits", a.act_bits), ("edge_bits", a.edge_bits)] {
            if !(2..=16).contains(&bits) {
                return bad(format!("architecture.{name}: {bits} is outside 2..=16"));
            }
        }
        if a.hidden.contains(&0) {
            return bad("architecture.hidden: layer widths must be positive".into());
        }
        if let Some(p) = a.p_star_overrides.iter().flatten().chain(a.p_star.iter()).find(|&&p| !(2..=64).contains(&p)) {
            return bad(format!("architecture.p_star: {p} is outside 2..=64"));
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Largest magnitude of the input and of every layer's output on `data`.
pub fn calibrate(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    let fp = train::forward(model, &data.features, data.len(), Rounding::Quantized)?;
    let mut ranges = vec![max_abs(&data.features)];
    ranges.extend(fp.layers.iter().map(|c| max_abs(&c.y)));
    Ok(ranges)
}

/// Resets each activation scale from the quantized model's own outputs,
/// front to back, so later layers see already-requantized inputs.
pub fn recalibrate(model: &mut Model, data: &Dataset) -> Result<()> {
    for l in 0..model.layers.len() {
        let fp = train::forward(model, &data.features, data.len(), Rounding::Quantized)?;
        let range = max_abs(&fp.layers[l].y);
        if let Some(q) = model.layers[l].activation.quant.as_mut().filter(|_| range > 0.0) {
            q.d = (range / q.dtype.max() as f64).log2();
        }
    }
    Ok(())
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: ModelCheckpoint,
    /// Pretraining epochs followed by quantized epochs.
    pub metrics: Vec<EpochMetrics>,
    pub float_model: Model,
    pub float_test_accuracy: f64,
    pub test_accuracy: f64,
    pub train: Dataset,
    pub test: Dataset,
}

fn test_accuracy(model: &Model, train: &Dataset, test: &Dataset) -> Result<f64> {
    train::accuracy(model, if test.is_empty() { train } else { test })
}

/// Runs the full pipeline. Relative data paths resolve against `base`.
pub fn run(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.data.load(base)?;
    let arch = cfg.architecture.build(train_set.dim, train_set.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut float = init_float(&arch, &mut rng);
    let mut metrics = train::fit(&mut float, &train_set, &cfg.pretrain, &mut rng, 0)?;
    let float_test_accuracy = test_accuracy(&float, &train_set, &test_set)?;

    let ranges = calibrate(&float, &train_set)?;
    let mut model = quantize_from_float(&float, &arch, &ranges)?;
    model.fit_scales_to_caps()?;
    recalibrate(&mut model, &train_set)?;
    metrics.extend(train::fit(&mut model, &train_set, &cfg.train, &mut rng, cfg.pretrain.epochs)?);
    let test_accuracy = test_accuracy(&model, &train_set, &test_set)?;

    let provenance = Provenance { config_hash: cfg.hash()?, seed: cfg.seed };
    let checkpoint = ModelCheckpoint::new(model, provenance)?;
    Ok(RunOutput {
        checkpoint,
        metrics,
        float_model: float,
        float_test_accuracy,
        test_accuracy,
        train: train_set,
        test: test_set,
    })
}

/// `# config_hash=<hex> seed=<n>` line placed before CSV headers.
pub fn provenance_line(p: &Provenance) -> String {
    format!("# config_hash={} seed={}\n", p.config_hash, p.seed)
}

/// Metrics log as CSV with a provenance comment line.
pub fn metrics_csv(metrics: &[EpochMetrics], p: &Provenance) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "task_loss", "penalty", "metric", "sparsity"]).map_err(csv_err)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            crate::reals::format(m.task_loss),
            crate::reals::format(m.penalty),
            crate::reals::format(m.metric),
            crate::reals::format(m.sparsity),
        ])
        .map_err(csv_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf-8 csv");
    Ok(provenance_line(p) + &body)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes the checkpoint and metrics CSV under `out_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let ck = out_dir.join(&cfg.outputs.checkpoint);
    let mx = out_dir.join(&cfg.outputs.metrics);
    out.checkpoint.save(&ck)?;
    crate::checkpoint::write_file(&mx, metrics_csv(&out.metrics, &out.checkpoint.provenance)?.as_bytes())?;
    Ok((ck, mx))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tiny_config(kind: &str, p_star: Option<u32>) -> ExperimentConfig {
        let p = p_star.map_or("null".to_string(), |p| p.to_string());
        ExperimentConfig::from_json(&format!(
            r#"{{
              "format_version": 1,
              "seed": 3,
              "data": {{"kind": "blobs", "classes": 3, "features": 4, "per_class": 40,
                        "spread": "3", "noise": "0.7", "seed": 1, "test_fraction": "0.25"}},
              "architecture": {{"hidden": [8], "kind": "{kind}", "weight_bits": 6, "act_bits": 6, "p_star": {p}}},
              "pretrain": {{"epochs": 15, "batch_size": 16, "learning_rate": "0.01", "lr_factor": "0.5",
                            "lr_period": 10, "optimizer": "adam"}},
              "train": {{"epochs": 5, "batch_size": 16, "learning_rate": "0.002", "lr_factor": "0.5",
                         "lr_period": 10, "optimizer": "adam"}}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut v: serde_json::Value = serde_json::from_str(&tiny_config("wnq", Some(16)).to_json().unwrap()).unwrap();
        v["train"]["lamda"] = "0.1".into();
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = tiny_config("wnq", Some(16));
        c.train.lambda = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.lambda"));
        assert!(ExperimentConfig::from_json(&tiny_config("baseline", None).to_json().unwrap()).is_ok());
        let mut c = tiny_config("baseline", None);
        c.architecture.kind = QuantizerKind::Wnq;
        assert!(c.validate().is_err());
        let mut c = tiny_config("wnq", Some(16));
        c.architecture.p_star = Some(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_formatting() {
        let c = tiny_config("wnq", Some(16));
        let reparsed = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c.hash().unwrap(), reparsed.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(c.hash().unwrap(), d.hash().unwrap());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let c = tiny_config("wnq", Some(14));
        let a = run(&c, Path::new(".")).unwrap();
        let b = run(&c, Path::new(".")).unwrap();
        assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
        let p = &a.checkpoint.provenance;
        assert_eq!(metrics_csv(&a.metrics, p).unwrap(), metrics_csv(&b.metrics, p).unwrap());
        assert_eq!(a.metrics.len(), 20);
        let csv = metrics_csv(&a.metrics, p).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# config_hash="));
        assert_eq!(lines.next().unwrap(), "epoch,task_loss,penalty,metric,sparsity");
    }
}
