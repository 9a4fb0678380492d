//! `accguard` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage, parse and
//! I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accguard::attack::{attack_json, attack_model};
use accguard::bounds::{datatype_bound, l1_budget, weight_bound, BoundQuery};
use accguard::checkpoint::{write_file, ModelCheckpoint, Provenance};
use accguard::config::{self, ExperimentConfig};
use accguard::data::{read_csv, Dataset};
use accguard::infer::{run_int, AccumulatorSpec};
use accguard::metrics::{format_rate, model_stats};
use accguard::par::Exec;
use accguard::qcore::IntTensor;
use accguard::train::grad::argmax_rows;
use accguard::sweep::{rows_csv, run_sweep, threads_from_env, SweepPlan};
use accguard::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "accguard", version, about = "Accumulator-aware quantization: train, bound, attack and certify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-channel accumulator bounds of a checkpoint.
    Bounds {
        #[command(flatten)]
        io: CheckpointArgs,
        /// Accumulator width used for the l1 budget column.
        #[arg(long = "P", value_parser = clap::value_parser!(u32).range(2..=64))]
        p: Option<u32>,
    },
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the configuration's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the accumulator target of every layer.
        #[arg(long = "P", value_parser = clap::value_parser!(u32).range(2..=64))]
        p: Option<u32>,
    },
    /// Integer inference over a dataset with overflow counting.
    Eval {
        #[command(flatten)]
        io: CheckpointArgs,
        /// Experiment configuration whose test split is evaluated.
        #[arg(long, conflicts_with = "data")]
        config: Option<PathBuf>,
        /// CSV file with `label,feature...` rows.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "P", value_parser = clap::value_parser!(u32).range(2..=64))]
        p: Option<u32>,
    },
    /// Closed-form worst-case inputs against every neuron.
    Attack {
        #[command(flatten)]
        io: CheckpointArgs,
        #[arg(long = "P", value_parser = clap::value_parser!(u32).range(2..=64))]
        p: Option<u32>,
    },
    /// Grid sweep over bit widths, accumulator targets and seeds.
    Sweep {
        /// Sweep plan.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Sparsity, entropy and compression estimates per layer.
    Report {
        #[command(flatten)]
        io: CheckpointArgs,
    },
    /// Integer weights, scales and accumulators for deployment.
    Export {
        #[command(flatten)]
        io: CheckpointArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Config(_) | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json_text(v: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn with_provenance(p: &Provenance, mut v: Value) -> Value {
    v["config_hash"] = p.config_hash.clone().into();
    v["seed"] = p.seed.into();
    v
}

fn csv_text(p: &Provenance, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = config::provenance_line(p);
    s.push_str(&header.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn real(x: f64) -> String {
    accguard::reals::format(x)
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn accumulator_override(ck: &ModelCheckpoint, p: Option<u32>) -> Result<accguard::infer::IntModel> {
    let mut int = ck.int_model()?;
    if let Some(bits) = p {
        AccumulatorSpec::new(bits, accguard::infer::AccMode::Wraparound)?;
        int.set_accumulators(|_, a| AccumulatorSpec { bits, ..a });
    }
    Ok(int)
}

fn cmd_bounds(io: &CheckpointArgs, p: Option<u32>) -> Result<()> {
    let ck = ModelCheckpoint::load(&io.checkpoint)?;
    let model = &ck.model;
    let mut rows = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let input = model.input_dtype(l).expect("checkpoints are quantized");
        let weight = layer.spec.weight_dtype()?;
        let dt = datatype_bound(&BoundQuery::new(layer.k(), input, weight)?);
        let bits = p.unwrap_or(ck.layers[l].accumulator.bits);
        let budget = l1_budget(bits, input);
        for (i, row) in ck.layers[l].weights_int.iter().enumerate() {
            let wb = weight_bound(&IntTensor::from_vec(row.clone(), weight)?, input)?;
            rows.push((l, i, layer.k(), input.bits, weight.bits, dt.min_bits, wb.min_bits, budget));
        }
    }
    let text = match io.format.unwrap_or(Format::Csv) {
        Format::Csv => csv_text(
            &ck.provenance,
            &["layer", "channel", "K", "N", "M", "datatype_bits", "weight_bits", "l1_budget"],
            rows.iter().map(|r| {
                vec![r.0.to_string(), r.1.to_string(), r.2.to_string(), r.3.to_string(), r.4.to_string(), r.5.to_string(), r.6.to_string(), real(r.7)]
            }),
        ),
        Format::Json => json_text(&with_provenance(
            &ck.provenance,
            json!({
                "rows": rows.iter().map(|r| json!({
                    "layer": r.0, "channel": r.1, "K": r.2, "N": r.3, "M": r.4,
                    "datatype_bits": r.5, "weight_bits": r.6, "l1_budget": real(r.7),
                })).collect::<Vec<_>>()
            }),
        ))?,
    };
    emit(io.out.as_deref(), &text)
}

fn cmd_train(config_path: &Path, out: Option<&Path>, seed: Option<u64>, p: Option<u32>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = p {
        cfg.architecture.p_star = Some(p);
        cfg.architecture.p_star_overrides.clear();
    }
    let base = dir_of(config_path);
    let run = config::run(&cfg, &base)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or(base);
    let (ck, mx) = config::write_outputs(&cfg, &run, &out_dir)?;
    let summary = with_provenance(
        &run.checkpoint.provenance,
        json!({
            "checkpoint": ck.display().to_string(),
            "metrics": mx.display().to_string(),
            "float_metric": real(run.float_test_accuracy),
            "metric": real(run.test_accuracy),
            "penalty": real(run.checkpoint.model.penalty()?),
        }),
    );
    print!("{}", json_text(&summary)?);
    Ok(())
}

fn eval_dataset(config: Option<&Path>, data: Option<&Path>) -> Result<Dataset> {
    match (config, data) {
        (Some(c), _) => {
            let cfg = ExperimentConfig::load(c)?;
            Ok(cfg.data.load(&dir_of(c))?.1)
        }
        (None, Some(d)) => read_csv(d),
        (None, None) => Err(Error::Config("eval needs --config or --data".into())),
    }
}

fn report_rows(v: &Value) -> Vec<Vec<String>> {
    v["rows"]
        .as_array()
        .map(|rows| {
            rows.iter()
                .map(|r| ["layer", "neuron", "overflows", "worst_excursion", "macs"].iter().map(|k| r[*k].to_string()).collect())
                .collect()
        })
        .unwrap_or_default()
}

fn cmd_eval(io: &CheckpointArgs, config: Option<&Path>, data: Option<&Path>, p: Option<u32>) -> Result<()> {
    let ck = ModelCheckpoint::load(&io.checkpoint)?;
    let int = accumulator_override(&ck, p)?;
    let ds = eval_dataset(config, data)?;
    if ds.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    if ds.dim != int.in_features() {
        return Err(Error::Shape { expected: format!("{} input features", int.in_features()), got: format!("{}", ds.dim) });
    }
    let x = int.quantize_input(&ds.features)?;
    let (out, report) = run_int(&int, &x, Exec::Parallel)?;
    let pred = argmax_rows(&int.dequantize_output(&out)?, int.out_features());
    let hits = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    let metric = hits as f64 / ds.len() as f64;
    let mut v = report.to_json();
    v["metric"] = real(metric).into();
    v["samples"] = ds.len().into();
    v["accumulator_bits"] = int.layers.iter().map(|l| l.acc.bits).collect::<Vec<_>>().into();
    let v = with_provenance(&ck.provenance, v);
    let text = match io.format.unwrap_or(Format::Json) {
        Format::Json => json_text(&v)?,
        Format::Csv => csv_text(&ck.provenance, &["layer", "neuron", "overflows", "worst_excursion", "macs"], report_rows(&v)),
    };
    emit(io.out.as_deref(), &text)
}

fn cmd_attack(io: &CheckpointArgs, p: Option<u32>) -> Result<()> {
    let ck = ModelCheckpoint::load(&io.checkpoint)?;
    let int = accumulator_override(&ck, p)?;
    let results = attack_model(&int, Exec::Parallel);
    let mut v = attack_json(&results);
    v["accumulator_bits"] = int.layers.iter().map(|l| l.acc.bits).collect::<Vec<_>>().into();
    let v = with_provenance(&ck.provenance, v);
    let text = match io.format.unwrap_or(Format::Json) {
        Format::Json => json_text(&v)?,
        Format::Csv => csv_text(
            &ck.provenance,
            &["layer", "neuron", "overflows", "worst_excursion", "macs", "peak", "required_bits"],
            results.iter().map(|r| {
                vec![
                    r.layer.to_string(),
                    r.neuron.to_string(),
                    r.overflows.to_string(),
                    r.worst_excursion.to_string(),
                    r.macs.to_string(),
                    r.peak.to_string(),
                    r.required_bits.to_string(),
                ]
            }),
        ),
    };
    emit(io.out.as_deref(), &text)
}

fn cmd_sweep(plan_path: &Path, out: Option<&Path>, format: Option<Format>) -> Result<()> {
    let plan = SweepPlan::load(plan_path)?;
    let rows = run_sweep(&plan, &dir_of(plan_path), Exec::Parallel, threads_from_env())?;
    let hash = plan.hash()?;
    let text = match format.unwrap_or(Format::Csv) {
        Format::Csv => rows_csv(&rows, &hash, &plan.seeds)?,
        Format::Json => json_text(&json!({ "config_hash": hash, "seeds": plan.seeds, "rows": rows }))?,
    };
    emit(out, &text)
}

fn cmd_report(io: &CheckpointArgs) -> Result<()> {
    let ck = ModelCheckpoint::load(&io.checkpoint)?;
    let stats = model_stats(&ck.model)?;
    let text = match io.format.unwrap_or(Format::Csv) {
        Format::Csv => csv_text(
            &ck.provenance,
            &["layer", "sparsity", "entropy_bits", "compression_rate"],
            stats.iter().map(|s| vec![s.layer.clone(), real(s.sparsity), real(s.entropy_bits), format_rate(s.compression_rate)]),
        ),
        Format::Json => json_text(&with_provenance(
            &ck.provenance,
            json!({
                "rows": stats.iter().map(|s| json!({
                    "layer": s.layer,
                    "elements": s.elements,
                    "weight_bits": s.weight_bits,
                    "sparsity": real(s.sparsity),
                    "entropy_bits": real(s.entropy_bits),
                    "compression_rate": format_rate(s.compression_rate),
                })).collect::<Vec<_>>()
            }),
        ))?,
    };
    emit(io.out.as_deref(), &text)
}

fn cmd_export(io: &CheckpointArgs) -> Result<()> {
    let ck = ModelCheckpoint::load(&io.checkpoint)?;
    let int = ck.int_model()?;
    let text = match io.format.unwrap_or(Format::Json) {
        Format::Json => {
            let layers: Vec<Value> = int
                .layers
                .iter()
                .map(|l| {
                    json!({
                        "weights_int": l.weights.data().chunks(l.k()).collect::<Vec<_>>(),
                        "weight_scales": l.weight_scales.iter().map(|s| real(*s)).collect::<Vec<_>>(),
                        "bias": l.bias.iter().map(|b| real(*b)).collect::<Vec<_>>(),
                        "relu": l.relu,
                        "input": { "bits": l.input_dtype.bits, "signed": l.input_dtype.signed, "scale": real(l.input_scale) },
                        "output": { "bits": l.output.dtype.bits, "signed": l.output.dtype.signed, "scale": real(l.output.scale()) },
                        "accumulator": l.acc,
                    })
                })
                .collect();
            json_text(&with_provenance(&ck.provenance, json!({ "input_scale": real(int.input.scale()), "layers": layers })))?
        }
        Format::Csv => csv_text(
            &ck.provenance,
            &["layer", "channel", "weight_scale", "bias", "accumulator_bits", "weights"],
            int.layers.iter().enumerate().flat_map(|(li, l)| {
                (0..l.channels()).map(move |i| {
                    let w: Vec<String> = l.row(i).iter().map(|v| v.to_string()).collect();
                    vec![li.to_string(), i.to_string(), real(l.weight_scales[i]), real(l.bias[i]), l.acc.bits.to_string(), w.join(" ")]
                })
            }),
        ),
    };
    emit(io.out.as_deref(), &text)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Bounds { io, p } => cmd_bounds(io, *p),
        Command::Train { config, out, seed, p } => cmd_train(config, out.as_deref(), *seed, *p),
        Command::Eval { io, config, data, p } => cmd_eval(io, config.as_deref(), data.as_deref(), *p),
        Command::Attack { io, p } => cmd_attack(io, *p),
        Command::Sweep { config, out, format } => cmd_sweep(config, out.as_deref(), *format),
        Command::Report { io } => cmd_report(io),
        Command::Export { io } => cmd_export(io),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
