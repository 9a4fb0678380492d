//! Grid sweeps over weight bits, activation bits, accumulator targets and seeds.
//!
//! `P*` is given as an offset from the data-type bound of the network's
//! interior layers. Configurations run in parallel; rows come back sorted
//! by key. A failing configuration becomes an error row and the sweep goes on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack;
use crate::bounds::{datatype_bound, l1_budget_floor, BoundQuery};
use crate::checkpoint::canonical_json;
use crate::config::{self, csv_err, ExperimentConfig};
use crate::error::{Error, Result};
use crate::infer::{AccMode, AccumulatorSpec};
use crate::metrics;
use crate::model::{Architecture, QuantizerKind};
use crate::par::{self, Exec};
use crate::reals::format as real;

pub const THREADS_ENV: &str = "ACCGUARD_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub base: ExperimentConfig,
    pub weight_bits: Vec<u32>,
    pub act_bits: Vec<u32>,
    /// Offsets from the data-type bound, `0` down to `-10` in the usual grid.
    pub p_offsets: Vec<i32>,
    pub seeds: Vec<u64>,
}

/// One configuration of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SweepKey {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub p_star: u32,
    pub seed: u64,
}

impl SweepPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::checkpoint::read_text(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(canonical_json(self)?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("weight_bits", self.weight_bits.is_empty()),
            ("act_bits", self.act_bits.is_empty()),
            ("p_offsets", self.p_offsets.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("{name}: sweep lists must be nonempty")));
            }
        }
        if let Some(o) = self.p_offsets.iter().find(|&&o| o > 0) {
            return Err(Error::Config(format!("p_offsets: {o} is above the data-type bound")));
        }
        if self.base.architecture.kind != QuantizerKind::Wnq {
            return Err(Error::Config("base.architecture.kind: sweeps train wnq models".into()));
        }
        self.base.validate()
    }

    /// All configurations, sorted by key. Duplicate keys are dropped.
    pub fn keys(&self, in_features: usize, out_features: usize) -> Result<Vec<(SweepKey, i32)>> {
        let mut out = Vec::new();
        for &m in &self.weight_bits {
            for &n in &self.act_bits {
                let mut arch = self.base.architecture.build(in_features, out_features);
                arch.weight_bits = m;
                arch.act_bits = n;
                let reference = reference_bound(&arch)? as i64;
                for &off in &self.p_offsets {
                    let p = (reference + off as i64).max(2) as u32;
                    for &seed in &self.seeds {
                        out.push((SweepKey { weight_bits: m, act_bits: n, p_star: p, seed }, off));
                    }
                }
            }
        }
        out.sort();
        out.dedup_by_key(|(k, _)| *k);
        Ok(out)
    }
}

/// Largest data-type bound over interior layers (all layers when the
/// network has no interior layer).
pub fn reference_bound(arch: &Architecture) -> Result<u32> {
    let specs = arch.layer_specs();
    let mut input = arch.input_dtype()?;
    let mut bounds = Vec::with_capacity(specs.len());
    for s in &specs {
        let q = BoundQuery::new(s.in_features, input, s.weight_dtype()?)?;
        bounds.push(datatype_bound(&q).min_bits);
        input = s.act_dtype()?;
    }
    let interior = if bounds.len() > 2 { &bounds[1..bounds.len() - 1] } else { &bounds[..] };
    Ok(*interior.iter().max().expect("at least one layer"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Some layer's l1 budget rounds down to zero.
    UntrainableBudget,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub p_offset: i32,
    pub p_star: u32,
    pub seed: u64,
    pub status: RowStatus,
    pub message: String,
    pub metric: Option<f64>,
    pub float_metric: Option<f64>,
    pub sparsity: Option<f64>,
    pub entropy_bits: Option<f64>,
    pub compression_rate: Option<f64>,
    pub penalty: Option<f64>,
    pub total_overflows: Option<u64>,
    pub certified: bool,
    pub pareto: bool,
    pub config_hash: String,
}

fn budget_is_empty(arch: &Architecture) -> Result<bool> {
    let mut input = arch.input_dtype()?;
    for s in arch.layer_specs() {
        if let Some(p) = s.p_star {
            if l1_budget_floor(p, input) == 0 {
                return Ok(true);
            }
        }
        input = s.act_dtype()?;
    }
    Ok(false)
}

fn config_for(plan: &SweepPlan, key: &SweepKey) -> ExperimentConfig {
    let mut cfg = plan.base.clone();
    cfg.seed = key.seed;
    cfg.architecture.weight_bits = key.weight_bits;
    cfg.architecture.act_bits = key.act_bits;
    cfg.architecture.p_star = Some(key.p_star);
    cfg
}

fn run_one(plan: &SweepPlan, base: &Path, key: &SweepKey, offset: i32, dims: (usize, usize)) -> SweepRow {
    let cfg = config_for(plan, key);
    let mut row = SweepRow {
        weight_bits: key.weight_bits,
        act_bits: key.act_bits,
        p_offset: offset,
        p_star: key.p_star,
        seed: key.seed,
        status: RowStatus::Ok,
        message: String::new(),
        metric: None,
        float_metric: None,
        sparsity: None,
        entropy_bits: None,
        compression_rate: None,
        penalty: None,
        total_overflows: None,
        certified: false,
        pareto: false,
        config_hash: cfg.hash().unwrap_or_default(),
    };
    let result = (|| -> Result<()> {
        cfg.validate()?;
        if budget_is_empty(&cfg.architecture.build(dims.0, dims.1))? {
            row.status = RowStatus::UntrainableBudget;
            row.message = format!("l1 budget at P*={} is below one integer step", key.p_star);
            return Ok(());
        }
        let out = config::run(&cfg, base)?;
        let model = &out.checkpoint.model;
        let stats = metrics::model_stats(model)?;
        let whole = stats.last().expect("model row");
        let mut int = out.checkpoint.int_model()?;
        int.set_accumulators(|_, _| AccumulatorSpec { bits: key.p_star, mode: AccMode::Wraparound });
        let overflows = attack::total_overflows(&attack::attack_model(&int, Exec::Sequential));
        row.metric = Some(out.test_accuracy);
        row.float_metric = Some(out.float_test_accuracy);
        row.sparsity = Some(whole.sparsity);
        row.entropy_bits = Some(whole.entropy_bits);
        row.compression_rate = Some(whole.compression_rate);
        row.penalty = Some(model.penalty()?);
        row.total_overflows = Some(overflows);
        row.certified = overflows == 0;
        Ok(())
    })();
    if let Err(e) = result {
        row.status = RowStatus::Error;
        row.message = e.to_string();
    }
    row
}

/// Thread cap from `ACCGUARD_THREADS`; unset, empty, zero or malformed means
/// no cap.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

/// Marks rows no other successful row dominates in (lower `P*`, higher metric).
pub fn mark_pareto(rows: &mut [SweepRow]) {
    let pts: Vec<Option<(u32, f64)>> =
        rows.iter().map(|r| if r.status == RowStatus::Ok { r.metric.map(|m| (r.p_star, m)) } else { None }).collect();
    for (i, row) in rows.iter_mut().enumerate() {
        row.pareto = match pts[i] {
            None => false,
            Some((p, m)) => !pts.iter().flatten().any(|&(q, n)| q <= p && n >= m && (q < p || n > m)),
        };
    }
}

/// Runs the plan with at most `threads` concurrent configurations.
pub fn run_sweep(plan: &SweepPlan, base: &Path, exec: Exec, threads: Option<usize>) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    let (train, _) = plan.base.data.load(base)?;
    let dims = (train.dim, train.classes);
    let keys = plan.keys(dims.0, dims.1)?;
    let mut rows = par::with_threads(threads, || par::map(exec, &keys, |(k, off)| run_one(plan, base, k, *off, dims)));
    mark_pareto(&mut rows);
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), real)
}

/// Sweep rows as CSV, preceded by a provenance comment.
pub fn rows_csv(rows: &[SweepRow], plan_hash: &str, seeds: &[u64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "weight_bits",
        "act_bits",
        "p_offset",
        "p_star",
        "seed",
        "status",
        "metric",
        "float_metric",
        "sparsity",
        "entropy_bits",
        "compression_rate",
        "penalty",
        "total_overflows",
        "certified",
        "pareto",
        "config_hash",
        "message",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let status = match r.status {
            RowStatus::Ok => "ok",
            RowStatus::UntrainableBudget => "untrainable_budget",
            RowStatus::Error => "error",
        };
        w.write_record([
            r.weight_bits.to_string(),
            r.act_bits.to_string(),
            r.p_offset.to_string(),
            r.p_star.to_string(),
            r.seed.to_string(),
            status.to_string(),
            opt(r.metric),
            opt(r.float_metric),
            opt(r.sparsity),
            opt(r.entropy_bits),
            r.compression_rate.map_or(String::new(), |c| if c.is_infinite() { "infinite".into() } else { real(c) }),
            opt(r.penalty),
            r.total_overflows.map_or(String::new(), |t| t.to_string()),
            r.certified.to_string(),
            r.pareto.to_string(),
            r.config_hash.clone(),
            r.message.clone(),
        ])
        .map_err(csv_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf-8 csv");
    let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    Ok(format!("# config_hash={plan_hash} seed={}\n{body}", seeds.join(";")))
}
