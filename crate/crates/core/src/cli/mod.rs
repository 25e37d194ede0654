//! The `fpq` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O error, 3 validation error.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::adaround::{learn_pipeline_rounding, LearnConfig, DEFAULT_BATCH_UNCONDITIONAL};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::formatsearch::{assign_model, assign_model_propagated, AssignMode, Assigned, SearchSpace, DEFAULT_BIAS_CANDIDATES};
use crate::fpcodec::{quantize_fp, quantize_int, FpFormat, IntQuantConfig};
use crate::netsim::{capture_calib, quantize_weight, run_pipeline, PipelineDesc, TensorSlot, CSV_HEADER};
use crate::tensorstore::{
    read_container, sparsity, sqnr_db, write_atomic, write_container, CalibSet, QuantManifest, QuantRecord, Tensor,
    TensorKind, mse,
};

#[derive(Debug, Parser)]
#[command(name = "fpq", version, about = "Low-bitwidth floating-point quantization toolkit")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List the tensors of a container.
    Inspect(InspectArgs),
    /// Quantize the tensors of a container to a fixed format or per a manifest.
    Quantize(QuantizeArgs),
    /// Pick a format and bias for every tensor by MSE search.
    Search(SearchArgs),
    /// Learn rounding masks for the FP4 weights of a pipeline.
    LearnRounding(LearnArgs),
    /// Compare a quantized pipeline run against full precision.
    Simulate(SimulateArgs),
    /// Per-tensor quantization error and sparsity table.
    Report(ReportArgs),
    /// Write the synthetic mini U-Net, calibration captures and an input.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct InspectArgs {
    container: PathBuf,
    /// Print every value.
    #[arg(long)]
    values: bool,
    /// Check each tensor against the code set of its record.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["format", "int", "manifest"])))]
struct QuantizeArgs {
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Minifloat encoding such as E4M3.
    #[arg(long, value_parser = parse_encoding)]
    format: Option<(u32, u32)>,
    /// Exponent bias; defaults to 2^(e-1).
    #[arg(long, requires = "format")]
    bias: Option<f64>,
    /// Integer baseline with this many bits.
    #[arg(long)]
    int: Option<u32>,
    /// Quantize per manifest records, applying rounding masks.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Restrict to these tensors.
    #[arg(long = "tensor")]
    only: Vec<String>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration container with `tensor@t<k>#<j>` entries.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Search in pipeline order; without it every model tensor is a weight
    /// and every calibration tensor an activation.
    #[arg(long)]
    pipeline: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    /// Weight bitwidth.
    #[arg(long, default_value_t = 8, value_parser = parse_bitwidth)]
    bitwidth: u32,
    /// Activation bitwidth.
    #[arg(long, default_value_t = 8, value_parser = parse_bitwidth)]
    act_bitwidth: u32,
    #[arg(long, default_value_t = DEFAULT_BIAS_CANDIDATES)]
    bias_candidates: usize,
    /// Calibration samples per activation, spread over timesteps; all when omitted.
    #[arg(long)]
    init_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-capture activations through the partially quantized pipeline.
    #[arg(long, requires = "pipeline")]
    propagate: bool,
    /// Calibration tensor holding network inputs, for --propagate.
    #[arg(long, default_value = fixtures::INPUT_NAME)]
    input_name: String,
    /// Integer baseline at the given bitwidths instead of minifloat search.
    #[arg(long)]
    int: bool,
}

#[derive(Debug, Args)]
struct LearnArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pipeline: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out_manifest: PathBuf,
    /// Model container with the masks added.
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_UNCONDITIONAL)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    reg_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only these weight records.
    #[arg(long = "tensor")]
    only: Vec<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    pipeline: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Without a manifest both runs are full precision.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Tensor to use from the input container; needed when it holds several.
    #[arg(long)]
    input_name: Option<String>,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration samples per timestep.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Timesteps captured per sample.
    #[arg(long, default_value_t = 10)]
    steps: usize,
}

fn parse_bitwidth(s: &str) -> std::result::Result<u32, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        _ => Err(format!("bitwidth must be 4 or 8, got {s}")),
    }
}

fn parse_encoding(s: &str) -> std::result::Result<(u32, u32), String> {
    let bad = || format!("expected an encoding like E4M3, got {s}");
    let rest = s.strip_prefix(['E', 'e']).ok_or_else(bad)?;
    let (e, m) = rest.split_once(['M', 'm']).ok_or_else(bad)?;
    Ok((e.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?))
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Quantize(a) => quantize(a),
        Command::Search(a) => search(a),
        Command::LearnRounding(a) => learn_rounding(a),
        Command::Simulate(a) => simulate(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("fpq: usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) if e.is_io() => {
            eprintln!("fpq: I/O error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("fpq: invalid input: {e}");
            ExitCode::from(3)
        }
    }
}

fn by_name(tensors: &[Tensor]) -> Result<HashMap<String, Tensor>> {
    let mut map = HashMap::with_capacity(tensors.len());
    for t in tensors {
        if map.insert(t.name().to_string(), t.clone()).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor name {}", t.name())));
        }
    }
    Ok(map)
}

fn load_model(path: &Path) -> Result<(Vec<Tensor>, HashMap<String, Tensor>)> {
    let tensors = read_container(path)?;
    let map = by_name(&tensors)?;
    Ok((tensors, map))
}

fn fmt_bias(b: Option<f64>) -> String {
    b.map(|b| format!("{b:.17e}")).unwrap_or_default()
}

fn inspect(a: InspectArgs) -> CmdResult {
    let tensors = read_container(&a.container)?;
    let manifest = a.manifest.as_deref().map(QuantManifest::load).transpose()?;
    println!("{}: {} tensors", a.container.display(), tensors.len());
    for t in &tensors {
        let (lo, hi) = t
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let distinct: HashSet<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        print!(
            "{:<32} shape {:?} numel {} min {} max {} sparsity {:.4} distinct {}",
            t.name(),
            t.shape(),
            t.numel(),
            lo,
            hi,
            sparsity(t),
            distinct.len()
        );
        if let Some(fmt) = manifest.as_ref().and_then(|m| m.get(t.name())).map(|r| r.fp_format()).transpose()?.flatten() {
            let codes: HashSet<u32> = fmt.enumerate_codes().iter().map(|&c| (c as f32).to_bits()).collect();
            let off = t.data().iter().filter(|v| !codes.contains(&v.to_bits()) && **v != 0.0).count();
            print!(" {fmt}: {off} values off-grid");
        }
        println!();
        if a.values {
            let vals: Vec<String> = t.data().iter().map(f32::to_string).collect();
            println!("  [{}]", vals.join(", "));
        }
    }
    Ok(())
}

fn quantize(a: QuantizeArgs) -> CmdResult {
    let (tensors, map) = load_model(&a.input)?;
    for n in &a.only {
        if !map.contains_key(n) {
            return Err(Error::Missing(format!("tensor {n}")).into());
        }
    }
    let manifest = a.manifest.as_deref().map(QuantManifest::load).transpose()?;
    let fmt = a.format.map(|(e, m)| FpFormat::new(e as i32, m as i32, a.bias)).transpose()?;
    let int = a.int.map(IntQuantConfig::new).transpose()?;
    let mut out = Vec::with_capacity(tensors.len());
    for t in &tensors {
        let selected = a.only.is_empty() || a.only.iter().any(|n| n == t.name());
        let q = if !selected {
            t.clone()
        } else if let Some(fmt) = &fmt {
            quantize_fp(t, fmt)?
        } else if let Some(cfg) = int {
            quantize_int(t, cfg)?.tensor
        } else {
            let m = manifest.as_ref().expect("one target is required");
            quantize_weight(m.get(t.name()), t, &map)?
        };
        println!("{:<32} mse {:.6e}  sparsity {:.4} -> {:.4}", t.name(), mse(t, &q)?, sparsity(t), sparsity(&q));
        out.push(q);
    }
    write_container(&a.out, &out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn default_order(model: &[Tensor], calib: Option<&CalibSet>) -> Vec<TensorSlot> {
    let slot = |name: &str, kind| TensorSlot {
        name: name.to_string(),
        kind,
        layer: name.to_string(),
        quantize: true,
    };
    let mut order: Vec<TensorSlot> = model.iter().map(|t| slot(t.name(), TensorKind::Weight)).collect();
    if let Some(c) = calib {
        order.extend(c.tensor_names().iter().map(|n| slot(n, TensorKind::Activation)));
    }
    order
}

fn subsample(calib: &CalibSet, names: &[String], n: usize, seed: u64) -> Result<CalibSet> {
    let mut out = CalibSet::new();
    for name in names {
        for (j, t) in calib.sample_uniform(name, n, seed)?.into_iter().enumerate() {
            out.insert(name, 0, j as u32, t)?;
        }
    }
    Ok(out)
}

fn search(a: SearchArgs) -> CmdResult {
    if a.bias_candidates == 0 {
        return Err(Failure::Usage("--bias-candidates must be at least 1".into()));
    }
    let (model, map) = load_model(&a.model)?;
    let calib = a.calib.as_deref().map(CalibSet::load).transpose()?;
    let desc = a.pipeline.as_deref().map(PipelineDesc::load).transpose()?;
    let mode = if a.int {
        AssignMode::Int {
            weight_bits: a.bitwidth,
            activation_bits: a.act_bitwidth,
        }
    } else {
        let w = SearchSpace::for_bitwidth(a.bitwidth)?.with_bias_candidates(a.bias_candidates);
        let x = SearchSpace::for_bitwidth(a.act_bitwidth)?.with_bias_candidates(a.bias_candidates);
        w.validate()?;
        AssignMode::Fp { weights: w, activations: x }
    };
    println!(
        "search: weights {}-bit, activations {}-bit, {}, {} bias candidates, init samples {}, seed {}{}",
        a.bitwidth,
        a.act_bitwidth,
        if a.int { "integer" } else { "minifloat" },
        a.bias_candidates,
        a.init_samples.map_or("all".to_string(), |n| n.to_string()),
        a.seed,
        if a.propagate { ", propagated" } else { "" }
    );
    let Assigned { manifest, assignments } = if a.propagate {
        let desc = desc.as_ref().expect("clap enforces --pipeline");
        let calib = calib
            .as_ref()
            .ok_or_else(|| Failure::Usage("--propagate needs --calib with network inputs".into()))?;
        let inputs = match a.init_samples {
            Some(n) => calib.sample_uniform(&a.input_name, n, a.seed)?,
            None => calib.entries_for(&a.input_name).into_iter().cloned().collect(),
        };
        if inputs.is_empty() {
            return Err(Error::Missing(format!("calibration tensor {}", a.input_name)).into());
        }
        let refs: Vec<&Tensor> = inputs.iter().collect();
        assign_model_propagated(desc, &map, &refs, &mode)?
    } else {
        let order = match &desc {
            Some(d) => {
                d.validate(&map)?;
                d.tensor_order()
            }
            None => default_order(&model, calib.as_ref()),
        };
        let empty = CalibSet::new();
        let calib = calib.as_ref().unwrap_or(&empty);
        let acts: Vec<String> = order
            .iter()
            .filter(|s| s.kind == TensorKind::Activation && s.quantize)
            .map(|s| s.name.clone())
            .collect();
        for n in &acts {
            if !calib.contains(n) {
                return Err(Error::Missing(format!("calibration samples for activation {n}")).into());
            }
        }
        let init = match a.init_samples {
            Some(n) => subsample(calib, &acts, n, a.seed)?,
            None => calib.clone(),
        };
        assign_model(&map, &init, &order, &mode)?
    };
    for asg in &assignments {
        let record = manifest.get(&asg.name).expect("every assignment has a record");
        match &asg.result {
            Some(r) => println!(
                "{:<32} {:<12} bias {:>10.4} mse {:.6e} (evaluated {} candidates)",
                asg.name,
                r.format.encoding_name(),
                r.format.bias(),
                r.mse,
                r.evaluated
            ),
            None => println!("{:<32} {}", asg.name, record.format_label()),
        }
    }
    manifest.save(&a.out)?;
    println!("wrote {} ({} records)", a.out.display(), manifest.len());
    Ok(())
}

fn learn_rounding(a: LearnArgs) -> CmdResult {
    let (model, map) = load_model(&a.model)?;
    let desc = PipelineDesc::load(&a.pipeline)?;
    let manifest = QuantManifest::load(&a.manifest)?;
    let calib = CalibSet::load(&a.calib)?;
    let cfg = LearnConfig {
        iterations: a.iters,
        step_size: a.lr,
        batch_size: a.batch,
        reg_weight: a.reg_weight,
        seed: a.seed,
    };
    cfg.validate()?;
    println!(
        "learn-rounding: {} iterations, step size {}, batch {}, regularizer weight {}, seed {}",
        cfg.iterations, cfg.step_size, cfg.batch_size, cfg.reg_weight, cfg.seed
    );
    let only = (!a.only.is_empty()).then_some(a.only.as_slice());
    let (out_manifest, learned) = learn_pipeline_rounding(&desc, &map, &manifest, &calib, &cfg, only)?;
    if learned.is_empty() {
        println!("no FP4 weight records to learn");
    }
    let mut masks: HashMap<&str, &Tensor> = HashMap::new();
    for l in &learned {
        println!(
            "{:<32} best objective {:.6e}  polarized {:.4}  flipped {} of {}",
            l.weight,
            l.best_objective,
            l.polarized,
            l.flipped,
            l.mask.numel()
        );
        masks.insert(l.mask.name(), &l.mask);
    }
    // replace stale masks in place, append new ones in layer order
    let mut out: Vec<Tensor> = model
        .iter()
        .map(|t| masks.get(t.name()).map_or_else(|| t.clone(), |m| (*m).clone()))
        .collect();
    for l in &learned {
        if !map.contains_key(l.mask.name()) {
            out.push(l.mask.clone());
        }
    }
    write_container(&a.out_model, &out)?;
    out_manifest.save(&a.out_manifest)?;
    println!("wrote {} and {}", a.out_manifest.display(), a.out_model.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let desc = PipelineDesc::load(&a.pipeline)?;
    let (_, map) = load_model(&a.model)?;
    let manifest = a.manifest.as_deref().map(QuantManifest::load).transpose()?;
    let inputs = read_container(&a.input)?;
    let input = match &a.input_name {
        Some(n) => inputs
            .iter()
            .find(|t| t.name() == n)
            .ok_or_else(|| Error::Missing(format!("input tensor {n}")))?,
        None => match inputs.as_slice() {
            [one] => one,
            [] => return Err(Error::Empty(format!("input container {}", a.input.display())).into()),
            _ => return Err(Failure::Usage("input container holds several tensors; pick one with --input-name".into())),
        },
    };
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let report = run_pipeline(&desc, &map, manifest.as_ref(), input, a.steps)?;
    println!(
        "simulate: {} steps, {}",
        a.steps,
        if manifest.is_some() { "quantized vs full precision" } else { "full precision only" }
    );
    print!("{}", report.summary());
    if let Some(csv) = &a.csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
        println!("wrote {}", csv.display());
    }
    Ok(())
}

fn report(a: ReportArgs) -> CmdResult {
    let (model, map) = load_model(&a.model)?;
    let manifest = a.manifest.as_deref().map(QuantManifest::load).transpose()?;
    let mask_refs: HashSet<&str> = manifest
        .iter()
        .flat_map(|m| m.records.iter().filter_map(|r| r.rounding_mask_ref.as_deref()))
        .collect();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let (mut zeros_raw, mut zeros_q, mut total) = (0usize, 0usize, 0usize);
    println!("{:<32} {:<12} {:>12} {:>10} {:>10} {:>10}", "tensor", "format", "mse", "sqnr_db", "raw_zero", "q_zero");
    for t in model.iter().filter(|t| !mask_refs.contains(t.name())) {
        let record: Option<&QuantRecord> = manifest.as_ref().and_then(|m| m.get(t.name()));
        let q = quantize_weight(record, t, &map)?;
        let err = mse(t, &q)?;
        let sq = match sqnr_db(t, &q) {
            Ok(v) => v,
            Err(Error::Config(_)) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        let label = record.map(QuantRecord::format_label).unwrap_or_else(|| "fp32".into());
        let (sr, sqz) = (sparsity(t), sparsity(&q));
        zeros_raw += t.data().iter().filter(|v| **v == 0.0).count();
        zeros_q += q.data().iter().filter(|v| **v == 0.0).count();
        total += t.numel();
        println!("{:<32} {:<12} {:>12.4e} {:>10.2} {:>10.4} {:>10.4}", t.name(), label, err, sq, sr, sqz);
        let _ = writeln!(csv, "{},{},{},{},{},{}", t.name(), err, sq, sqz, label, fmt_bias(record.and_then(QuantRecord::bias)));
    }
    if total > 0 {
        println!(
            "overall sparsity: {:.6} raw, {:.6} quantized",
            zeros_raw as f64 / total as f64,
            zeros_q as f64 / total as f64
        );
    }
    if let Some(path) = &a.csv {
        write_atomic(path, csv.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    if a.samples == 0 || a.steps == 0 {
        return Err(Failure::Usage("--samples and --steps must be at least 1".into()));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let toy = fixtures::mini_unet(a.seed);
    let inputs: Vec<Tensor> = (0..a.samples)
        .map(|j| fixtures::mini_unet_input(fixtures::input_seed(a.seed, j as u64 + 1)))
        .collect();
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let calib = capture_calib(&toy.desc, &toy.tensors, &refs, a.steps, fixtures::INPUT_NAME)?;
    let held_out = fixtures::mini_unet_input(fixtures::input_seed(a.seed, 0));
    let dir = &a.out_dir;
    write_container(dir.join("model.fpqt"), &toy.weights())?;
    toy.desc.save(dir.join("pipeline.json"))?;
    calib.save(dir.join("calib.fpqt"))?;
    write_container(dir.join("input.fpqt"), &[held_out])?;
    println!(
        "wrote model.fpqt ({} tensors), pipeline.json ({} layers), calib.fpqt ({} entries), input.fpqt to {}",
        toy.tensors.len(),
        toy.desc.layers.len(),
        calib.len(),
        dir.display()
    );
    Ok(())
}
