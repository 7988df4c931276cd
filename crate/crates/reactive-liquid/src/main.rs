//! `rliquid` command line: run an experiment in liquid or reactive mode and
//! write its CSV reports, or compare two finished runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reactive_liquid::harness::{
    compare::compare_series,
    report::{emit_comparison, emit_reports, read_cumulative},
    run_experiment, InputSpec, Mode, RunConfig, Workload,
};
use reactive_liquid::tcmm::{MacroJobParams, MicroJobParams};
use reactive_liquid::time::SECOND;

#[derive(Parser)]
#[command(
    name = "rliquid",
    version,
    about = "Stream-processing experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write throughput/cumulative/completion CSVs.
    Run(Box<RunArgs>),
    /// Compare two run directories by their cumulative series.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Processing architecture: "liquid" or "reactive".
    #[arg(long)]
    mode: String,
    /// Fixed task count per job (liquid mode).
    #[arg(long, default_value_t = 3)]
    tasks: u32,
    /// Pool bounds per job (reactive mode).
    #[arg(long, default_value_t = 3)]
    pool_min: u32,
    #[arg(long, default_value_t = 12)]
    pool_max: u32,
    #[arg(long, default_value_t = 3)]
    partitions: u32,
    /// Consume batch size n.
    #[arg(long, default_value_t = 64)]
    batch_n: u32,
    /// Per-window node failure probability in [0,1].
    #[arg(long, default_value_t = 0.0)]
    failure_prob: f64,
    /// Failure window in (scaled) seconds; default 600 * time-scale.
    #[arg(long)]
    fail_window: Option<u64>,
    /// Node downtime in (scaled) seconds; default 300 * time-scale.
    #[arg(long)]
    downtime: Option<u64>,
    /// Scale factor applied to the reference 10 min / 5 min failure timing.
    #[arg(long, default_value_t = 0.05)]
    time_scale: f64,
    #[arg(long, default_value_t = 3)]
    nodes: u32,
    /// Processing cores per simulated node.
    #[arg(long, default_value_t = 2)]
    cores: u32,
    /// Run duration in virtual seconds.
    #[arg(long, default_value_t = 120)]
    duration: u64,
    /// Extra virtual seconds after the horizon to let the system drain.
    #[arg(long, default_value_t = 0)]
    quiesce_grace: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Workload source: "synth:taxis=100,points=4000,hotspots=5" or "tdrive:PATH".
    #[arg(long, default_value = "synth:taxis=100,points=4000,hotspots=5")]
    input: String,
    /// Micro-cluster merge distance threshold in degrees.
    #[arg(long, default_value_t = 0.01)]
    dmax: f64,
    #[arg(long, default_value_t = 10)]
    macro_k: u32,
    /// Macro-clustering period in virtual seconds.
    #[arg(long, default_value_t = 10)]
    macro_period: u64,
    /// Workload: "tcmm" or "fixed:TP_MICROS" (constant-cost identity job).
    #[arg(long, default_value = "tcmm")]
    workload: String,
    /// Virtual microseconds to consume one message.
    #[arg(long, default_value_t = 1000)]
    tc_micros: u64,
    /// Base processing cost per point (tcmm workload).
    #[arg(long, default_value_t = 2000)]
    tp_base_micros: u64,
    /// Additional cost per existing micro cluster (tcmm workload).
    #[arg(long, default_value_t = 1)]
    tp_per_cluster_micros: u64,
    /// Live ingestion rate in messages/second instead of preloading.
    #[arg(long)]
    rate: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Jump the virtual clock instead of pacing it against real time.
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

#[derive(Args)]
struct CompareArgs {
    a_dir: PathBuf,
    b_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_input(spec: &str) -> Result<InputSpec, String> {
    if let Some(path) = spec.strip_prefix("tdrive:") {
        return Ok(InputSpec::TDrive(PathBuf::from(path)));
    }
    if let Some(rest) = spec.strip_prefix("synth:") {
        let mut taxis = 100u32;
        let mut points = 4000u32;
        let mut hotspots = 5u32;
        for part in rest.split(',').filter(|s| !s.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("bad synth parameter {part:?}"))?;
            let value: u32 = value
                .parse()
                .map_err(|_| format!("bad synth value {value:?}"))?;
            match key {
                "taxis" => taxis = value,
                "points" => points = value,
                "hotspots" => hotspots = value,
                _ => return Err(format!("unknown synth parameter {key:?}")),
            }
        }
        return Ok(InputSpec::Synth {
            taxis,
            points_per_taxi: points,
            hotspots,
        });
    }
    Err(format!(
        "input must be synth:... or tdrive:PATH, got {spec:?}"
    ))
}

fn build_config(args: &RunArgs) -> Result<RunConfig, String> {
    let mode = match args.mode.as_str() {
        "liquid" => Mode::Liquid { tasks: args.tasks },
        "reactive" => Mode::Reactive {
            pool_min: args.pool_min,
            pool_max: args.pool_max,
        },
        other => return Err(format!("mode must be liquid or reactive, got {other:?}")),
    };
    let workload = if args.workload == "tcmm" {
        Workload::Tcmm {
            micro: MicroJobParams {
                d_max: args.dmax,
                cost_base: args.tp_base_micros,
                cost_per_cluster: args.tp_per_cluster_micros,
            },
            macro_params: MacroJobParams {
                k: args.macro_k,
                period: args.macro_period * SECOND,
                max_iters: 50,
                fold_cost: 50,
                cost_per_item: 2,
            },
        }
    } else if let Some(tp) = args.workload.strip_prefix("fixed:") {
        let process_cost = tp
            .parse()
            .map_err(|_| format!("bad fixed workload cost {tp:?}"))?;
        Workload::Fixed { process_cost }
    } else {
        return Err(format!(
            "workload must be tcmm or fixed:TP_MICROS, got {:?}",
            args.workload
        ));
    };
    let scaled = |reference_s: u64| ((reference_s as f64 * args.time_scale).round() as u64).max(1);
    let fail_window = args.fail_window.unwrap_or_else(|| scaled(600)) * SECOND;
    let downtime = args.downtime.unwrap_or_else(|| scaled(300)) * SECOND;

    Ok(RunConfig {
        mode,
        partitions: args.partitions,
        batch_n: args.batch_n,
        nodes: args.nodes,
        cores_per_node: args.cores,
        duration_s: args.duration,
        quiesce_grace_s: args.quiesce_grace,
        seed: args.seed,
        failure_probability: args.failure_prob,
        fail_window,
        downtime,
        workload,
        input: parse_input(&args.input)?,
        rate: args.rate,
        consume_cost: args.tc_micros,
        pace_realtime: !args.deterministic,
        ..RunConfig::default()
    })
}

fn run(args: &RunArgs) -> Result<(), String> {
    let cfg = build_config(args)?;
    let output = run_experiment(&cfg).map_err(|e| e.to_string())?;
    emit_reports(&args.out, &output).map_err(|e| e.to_string())?;
    eprintln!(
        "{}: published {} messages, processed {} unique ({} duplicates), {} clusters",
        output.label,
        output.published,
        output.metrics.total_processed(),
        output.metrics.duplicate_count,
        output.metrics.clusters.count,
    );
    eprintln!("reports written to {}", args.out.display());
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), String> {
    let a = read_cumulative(&args.a_dir.join("cumulative.csv")).map_err(|e| e.to_string())?;
    let b = read_cumulative(&args.b_dir.join("cumulative.csv")).map_err(|e| e.to_string())?;
    let report = compare_series(&a, &b).map_err(|e| e.to_string())?;
    let a_label = args.a_dir.display().to_string();
    let b_label = args.b_dir.display().to_string();
    emit_comparison(&args.out, &report, &a_label, &b_label).map_err(|e| e.to_string())?;
    println!(
        "slope {:.4}, intercept {:.2}, r_squared {:.4}",
        report.slope, report.intercept, report.r_squared
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
