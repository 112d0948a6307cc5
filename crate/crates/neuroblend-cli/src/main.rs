//! Command-line front end tying build -> compile -> run -> verify ->
//! count -> bench into reproducible workflows.
//!
//! Exit codes: 0 success, 1 usage, 2 file/model errors, 3 verification
//! failure. The NB_THREADS environment variable overrides the worker
//! count for run and bench.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use neuroblend::builders::{build_neuroblend18, build_neuroblend20};
use neuroblend::costmodel::{count_ops, estimate_latency, HardwareProfile};
use neuroblend::init::{random_init, random_input};
use neuroblend::ir::validate;
use neuroblend::mixer::{build_blendmixer, FcPrecision, MixerSpec};
use neuroblend::modelio::{load_model, load_tensor, save_model, save_tensor};
use neuroblend::oracle::{binary_op_input_values, compare, reference_forward_with_dumps};
use neuroblend::passes::{compile_model, CompileOptions, PassName};
use neuroblend::runtime::ExecutionPlan;
use neuroblend::{Error, Graph, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "neuroblend", version, about = "Model-graph compiler and runtime for blended binary/fixed-point networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded model graph and write it as a .nblm file.
    Build {
        /// neuroblend20 | neuroblend18 | blendmixer-{s4,b4,2s4} | mlpmixer-{s4,b4,2s4}
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Mixing-block FC precision, e.g. BB/BB or FPB/BFP (mixers only).
        #[arg(long, default_value = "BB/BB")]
        fc_precision: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the pass pipeline and quantization, writing a compiled model.
    Compile {
        model: PathBuf,
        /// Comma-separated pass list; defaults to the full pipeline.
        #[arg(long)]
        pass_list: Option<String>,
        #[arg(long, default_value_t = 48)]
        word_size: u8,
        #[arg(long, default_value_t = 8)]
        frac_bits: u8,
        #[arg(short, long)]
        output: PathBuf,
        /// Write the pass report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Execute a compiled model on a .nbt input tensor.
    Run {
        plan: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Check fusion equivalence against the float reference over seeds.
    Verify {
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Human-readable lines instead of the JSON report.
        #[arg(long)]
        pretty: bool,
    },
    /// Count operations, parameters and model size.
    Count {
        model: PathBuf,
        /// Include a first-order latency estimate (compiled models).
        #[arg(long)]
        latency: bool,
        /// Human-readable table instead of JSON.
        #[arg(long)]
        pretty: bool,
    },
    /// Measure end-to-end execution throughput of a compiled model.
    Bench {
        plan: PathBuf,
        #[arg(long, default_value_t = 20)]
        iters: u32,
        #[arg(long, default_value_t = 3)]
        warmup: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::ManifestMismatch { .. }
        | Error::Manifest(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn workers_from_env() -> usize {
    std::env::var("NB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}

fn build_arch(arch: &str, classes: usize, fc_precision: &str) -> Result<Graph, Error> {
    let mixer = |spec: MixerSpec, precision: FcPrecision| -> Result<Graph, Error> {
        build_blendmixer(&spec, precision, classes)
    };
    match arch {
        "neuroblend20" => build_neuroblend20(classes),
        "neuroblend18" => build_neuroblend18(classes),
        _ => {
            if let Some(name) = arch.strip_prefix("blendmixer-") {
                let spec = MixerSpec::preset(name)
                    .ok_or_else(|| Error::InvalidMixer(format!("unknown mixer preset {name:?}")))?;
                mixer(spec, FcPrecision::parse(fc_precision)?)
            } else if let Some(name) = arch.strip_prefix("mlpmixer-") {
                let spec = MixerSpec::preset(name)
                    .ok_or_else(|| Error::InvalidMixer(format!("unknown mixer preset {name:?}")))?;
                mixer(spec, FcPrecision::ALL_FIXED)
            } else {
                Err(Error::InvalidBlock(format!("unknown architecture {arch:?}")))
            }
        }
    }
}

#[derive(Serialize)]
struct VerifySeedReport {
    seed: u64,
    max_abs_diff: f64,
    mean_abs_diff: f64,
    plane_mismatches: usize,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    seeds: u64,
    tol: f64,
    worst_max_abs_diff: f64,
    total_plane_mismatches: usize,
    failures: u64,
    per_seed: Vec<VerifySeedReport>,
}

fn cmd_verify(model: PathBuf, seeds: u64, tol: f64, pretty: bool) -> Result<u8, Error> {
    let graph = load_model(&model)?;
    let violations = validate(&graph);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations.len(), violations[0].to_string()));
    }
    let in_shape = graph.value(graph.inputs()[0].1).shape.clone();

    let mut report = VerifyReport {
        seeds,
        tol,
        worst_max_abs_diff: 0.0,
        total_plane_mismatches: 0,
        failures: 0,
        per_seed: Vec::new(),
    };
    for seed in 0..seeds {
        let input = random_input(&in_shape, seed.wrapping_mul(7919).wrapping_add(13), graph.frac_bits);
        let xs: Vec<f64> = input.iter().map(|&x| x as f64).collect();

        let unfused_planes = binary_op_input_values(&graph);
        let before = reference_forward_with_dumps(&graph, &xs, &unfused_planes)?;
        let (fused, _) = neuroblend::passes::run_pipeline(graph.clone(), &PassName::DEFAULT_PIPELINE)?;
        let fused_planes = binary_op_input_values(&fused);
        let after = reference_forward_with_dumps(&fused, &xs, &fused_planes)?;

        let rep = compare(&before.output, &after.output)?;
        let mut mismatches = 0usize;
        for (u, f) in unfused_planes.iter().zip(fused_planes.iter()) {
            mismatches += before.dumps[u]
                .iter()
                .zip(after.dumps[f].iter())
                .filter(|(a, b)| a != b)
                .count();
        }
        let pass = rep.max_abs_diff <= tol && mismatches == 0;
        if !pass {
            report.failures += 1;
        }
        report.worst_max_abs_diff = report.worst_max_abs_diff.max(rep.max_abs_diff);
        report.total_plane_mismatches += mismatches;
        report.per_seed.push(VerifySeedReport {
            seed,
            max_abs_diff: rep.max_abs_diff,
            mean_abs_diff: rep.mean_abs_diff,
            plane_mismatches: mismatches,
            pass,
        });
        if pretty {
            println!(
                "seed {seed}: max|d| = {:.3e} (tol {tol:.1e}), plane mismatches = {mismatches} -> {}",
                rep.max_abs_diff,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    if pretty {
        println!(
            "verified {seeds} seeds: worst max|d| = {:.3e}, failures = {}",
            report.worst_max_abs_diff, report.failures
        );
    } else {
        println!("{}", serde_json::to_string_pretty(&report).map_err(Error::Manifest)?);
    }
    Ok(if report.failures == 0 { 0 } else { EXIT_VERIFY })
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Build { arch, seed, classes, fc_precision, output } => {
            let graph = build_arch(&arch, classes, &fc_precision)?;
            let graph = random_init(graph, seed)?;
            let violations = validate(&graph);
            if !violations.is_empty() {
                return Err(Error::Invalid(violations.len(), violations[0].to_string()));
            }
            save_model(&graph, &output)?;
            eprintln!(
                "built {arch} (seed {seed}): {} nodes -> {}",
                graph.node_count(),
                output.display()
            );
            Ok(0)
        }
        Command::Compile { model, pass_list, word_size, frac_bits, output, report } => {
            let graph = load_model(&model)?;
            let passes = match pass_list {
                None => PassName::DEFAULT_PIPELINE.to_vec(),
                Some(list) => list
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let opts = CompileOptions { passes, word_size, frac_bits };
            let (compiled, pass_report) = compile_model(graph, &opts)?;
            save_model(&compiled, &output)?;
            if let Some(path) = report {
                let json = serde_json::to_vec_pretty(&pass_report).map_err(Error::Manifest)?;
                std::fs::write(path, json)?;
            }
            eprintln!(
                "compiled -> {} ({} nodes, {} rewrites)",
                output.display(),
                compiled.node_count(),
                pass_report.total_rewritten()
            );
            Ok(0)
        }
        Command::Run { plan, input, output } => {
            let graph = load_model(&plan)?;
            let exec = ExecutionPlan::from_graph(&graph)?;
            let tensor = load_tensor(&input)?;
            let data: Vec<f32> = match &tensor {
                Tensor::F32 { data, .. } => data.clone(),
                Tensor::I16(fx) => fx
                    .data
                    .iter()
                    .map(|&r| fx.format.dequantize_value(r) as f32)
                    .collect(),
                _ => {
                    return Err(Error::DtypeMismatch {
                        context: "run expects a float32 or int16 input tensor".into(),
                    })
                }
            };
            let workers = workers_from_env();
            let out = exec.execute_with_workers(&data, workers)?;
            save_tensor(
                &Tensor::F32 {
                    data: out.scores.clone(),
                    shape: out.raw.shape.clone(),
                },
                &output,
            )?;
            eprintln!(
                "ran {} steps ({workers} worker(s)), saturated = {}, acc overflow = {} -> {}",
                exec.step_count(),
                out.stats.saturated,
                out.stats.acc_overflow,
                output.display()
            );
            Ok(0)
        }
        Command::Verify { model, seeds, tol, pretty } => {
            if tol <= 0.0 {
                return Err(Error::ShapeMismatch {
                    context: "tolerance must be positive".into(),
                });
            }
            cmd_verify(model, seeds, tol, pretty)
        }
        Command::Count { model, latency, pretty } => {
            let graph = load_model(&model)?;
            let cost = count_ops(&graph);
            if pretty {
                println!("{:28} {:>14} {:>14} {:>12}", "layer", "BMAC", "FPMAC", "param bits");
                for l in &cost.layers {
                    if l.bmac + l.fpmac + l.binary_param_bits + l.fixed_param_bits == 0 {
                        continue;
                    }
                    println!(
                        "{:28} {:>14} {:>14} {:>12}",
                        l.name,
                        l.bmac,
                        l.fpmac,
                        l.binary_param_bits + l.fixed_param_bits
                    );
                }
                println!(
                    "total: bmac = {}, fpmac = {}, size = {} bytes ({:.3} MB)",
                    cost.bmac, cost.fpmac, cost.model_size_bytes, cost.model_size_mb
                );
            } else if latency {
                #[derive(Serialize)]
                struct Combined<A, B> {
                    cost: A,
                    latency: B,
                }
                let lat = estimate_latency(&graph, &HardwareProfile::default())?;
                let out = Combined { cost, latency: lat };
                println!("{}", serde_json::to_string_pretty(&out).map_err(Error::Manifest)?);
            } else {
                println!("{}", serde_json::to_string_pretty(&cost).map_err(Error::Manifest)?);
            }
            Ok(0)
        }
        Command::Bench { plan, iters, warmup, seed } => {
            if iters == 0 {
                return Err(Error::ShapeMismatch {
                    context: "iters must be positive".into(),
                });
            }
            let graph = load_model(&plan)?;
            let exec = ExecutionPlan::from_graph(&graph)?;
            let cost = count_ops(&graph);
            let in_shape = exec.input_shape().to_vec();
            let input = random_input(&in_shape, seed, graph.frac_bits);
            let workers = workers_from_env();
            for _ in 0..warmup {
                exec.execute_with_workers(&input, workers)?;
            }
            let t0 = Instant::now();
            for _ in 0..iters {
                std::hint::black_box(exec.execute_with_workers(&input, workers)?);
            }
            let elapsed = t0.elapsed();
            let per_run = elapsed.as_nanos() as f64 / iters as f64;
            let macs = (cost.bmac + cost.fpmac) as f64;
            println!(
                "{iters} runs ({warmup} warmup excluded), {workers} worker(s): {:.3} ms/run ({:.3} ns/op over {} ops, {:.2} GMAC/s)",
                per_run / 1e6,
                per_run / macs.max(1.0),
                cost.bmac + cost.fpmac,
                macs * iters as f64 / elapsed.as_secs_f64() / 1e9
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // usage errors exit 1 (clap's default would be 2)
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
