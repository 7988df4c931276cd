//! Experiment orchestration: builds a simulated cluster (broker, nodes, jobs in
//! liquid or reactive mode), preloads or streams the workload, applies the
//! failure plan, runs the event loop, and collects run metrics.

pub mod compare;
pub mod failure;
pub mod metrics;
pub mod models;
pub mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::broker::BrokerError;
use crate::ingest::{self, SynthSpec};
use crate::mailbox::NodeId;
use crate::processing::{self, FixedCostLogic, JobMode, JobSpec};
use crate::scaling::ElasticPoolConfig;
use crate::sim::{Component, Ctx, RunEvent, Sim, SimConfig, WakeReason};
use crate::supervision::spawn_supervisor;
use crate::tcmm::{
    self, MacroJobParams, MicroJobParams, TcmmMacroLogic, TcmmMicroLogic, TrajectoryPoint,
};
use crate::time::{Micros, SECOND};
use crate::virtual_messaging::create_virtual_topic;
use failure::{failure_schedule, FailurePlan};
use metrics::{ClusterSummary, GaugeSample, RunMetrics};

pub const INPUT_TOPIC: &str = "trajectories";
pub const MICRO_DELTAS_TOPIC: &str = "micro-deltas";
pub const MACRO_DELTAS_TOPIC: &str = "macro-deltas";
pub const RESULTS_TOPIC: &str = "results";
pub const MICRO_JOB: &str = "micro";
pub const MACRO_JOB: &str = "macro";
pub const FIXED_JOB: &str = "proc";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Liquid { tasks: u32 },
    Reactive { pool_min: u32, pool_max: u32 },
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Liquid { tasks } => format!("liquid-{tasks}"),
            Mode::Reactive { pool_max, .. } => format!("reactive-{pool_max}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Workload {
    Tcmm {
        micro: MicroJobParams,
        macro_params: MacroJobParams,
    },
    /// Synthetic constant-cost job; used for the completion-time model checks.
    Fixed { process_cost: Micros },
}

#[derive(Debug, Clone)]
pub enum InputSpec {
    Synth {
        taxis: u32,
        points_per_taxi: u32,
        hotspots: u32,
    },
    TDrive(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub partitions: u32,
    pub batch_n: u32,
    pub nodes: u32,
    pub cores_per_node: u32,
    pub duration_s: u64,
    pub quiesce_grace_s: u64,
    pub seed: u64,
    pub failure_probability: f64,
    pub fail_window: Micros,
    pub downtime: Micros,
    pub workload: Workload,
    pub input: InputSpec,
    /// Messages per second for live ingestion; None preloads the broker.
    pub rate: Option<u64>,
    pub consume_cost: Micros,
    pub publish_cost: Micros,
    pub high_watermark: u64,
    pub low_watermark: u64,
    pub evaluation_period: Micros,
    pub cooldown: Micros,
    /// Virtual consumers per subscribed job; defaults to the partition count.
    pub consumers: Option<u32>,
    pub mailbox_capacity: usize,
    pub heartbeat_interval: Micros,
    pub miss_threshold: u32,
    /// Pace the virtual clock against real time (demo mode).
    pub pace_realtime: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Reactive {
                pool_min: 3,
                pool_max: 12,
            },
            partitions: 3,
            batch_n: 64,
            nodes: 3,
            cores_per_node: 2,
            duration_s: 120,
            quiesce_grace_s: 0,
            seed: 42,
            failure_probability: 0.0,
            fail_window: 30 * SECOND,
            downtime: 15 * SECOND,
            workload: Workload::Tcmm {
                micro: MicroJobParams {
                    d_max: 0.01,
                    cost_base: 2_000,
                    cost_per_cluster: 1,
                },
                macro_params: MacroJobParams {
                    k: 10,
                    period: 10 * SECOND,
                    max_iters: 50,
                    fold_cost: 50,
                    cost_per_item: 2,
                },
            },
            input: InputSpec::Synth {
                taxis: 100,
                points_per_taxi: 4_000,
                hotspots: 5,
            },
            rate: None,
            consume_cost: 1_000,
            publish_cost: 100,
            high_watermark: 96,
            low_watermark: 8,
            evaluation_period: SECOND,
            cooldown: 2 * SECOND,
            consumers: None,
            mailbox_capacity: 1024,
            heartbeat_interval: 500_000,
            miss_threshold: 3,
            pace_realtime: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.nodes == 0 {
            return bad("need at least one worker node");
        }
        if self.partitions == 0 {
            return bad("need at least one partition");
        }
        if self.batch_n == 0 {
            return bad("batch size must be at least 1");
        }
        if self.duration_s == 0 {
            return bad("duration must be at least 1 second");
        }
        if !(0.0..=1.0).contains(&self.failure_probability) {
            return bad("failure probability must be within [0, 1]");
        }
        if self.consume_cost == 0 {
            return bad("consume cost must be at least 1 microsecond");
        }
        match self.mode {
            Mode::Liquid { tasks: 0 } => return bad("liquid mode needs tasks >= 1"),
            Mode::Reactive { pool_min, pool_max } if pool_min == 0 || pool_min > pool_max => {
                return bad("reactive pool bounds need 1 <= min <= max");
            }
            _ => {}
        }
        if let Some(c) = self.consumers {
            if c == 0 || c > self.partitions {
                return bad("consumer count must be in 1..=partitions");
            }
        }
        Ok(())
    }

    fn pool_config(&self, min: u32, max: u32) -> ElasticPoolConfig {
        ElasticPoolConfig {
            min_workers: min,
            max_workers: max,
            high_watermark: self.high_watermark,
            low_watermark: self.low_watermark,
            evaluation_period: self.evaluation_period,
            cooldown: self.cooldown,
        }
    }

    pub fn primary_job(&self) -> &'static str {
        match self.workload {
            Workload::Tcmm { .. } => MICRO_JOB,
            Workload::Fixed { .. } => FIXED_JOB,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}-p{:02}-seed{}",
            self.mode.label(),
            (self.failure_probability * 100.0).round() as u32,
            self.seed
        )
    }
}

/// Everything a finished run reports back.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub label: String,
    pub metrics: RunMetrics,
    pub gauges: Vec<GaugeSample>,
    pub events: Vec<RunEvent>,
    /// Messages placed on the input topic.
    pub published: u64,
    /// (unique completions, duplicates) per job.
    pub job_counts: BTreeMap<String, (u64, u64)>,
    /// Messages on the macro output topic (epoch emissions), if any.
    pub macro_emissions: u64,
}

fn taxi_key(taxi_id: u64) -> Vec<u8> {
    taxi_id.to_string().into_bytes()
}

fn job_mode(cfg: &RunConfig) -> JobMode {
    match cfg.mode {
        Mode::Liquid { tasks } => JobMode::Liquid { tasks },
        Mode::Reactive { pool_min, pool_max } => JobMode::Reactive {
            pool: cfg.pool_config(pool_min, pool_max),
            consumers: cfg.consumers.unwrap_or(cfg.partitions),
        },
    }
}

/// Streams points onto the input topic at a fixed rate (live-ingestion mode).
struct LiveSource {
    points: Vec<TrajectoryPoint>,
    cursor: usize,
    per_tick: u64,
}

const T_TICK: u32 = 1;
const TICK: Micros = 100_000;

impl Component for LiveSource {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start | WakeReason::Timer(T_TICK) => {
                let mut n = self.per_tick;
                while n > 0 && self.cursor < self.points.len() {
                    let p = self.points[self.cursor];
                    self.cursor += 1;
                    n -= 1;
                    let now = ctx.now();
                    let _ = ctx.sim.broker.publish(
                        "ingest",
                        INPUT_TOPIC,
                        Some(&taxi_key(p.taxi_id)),
                        &tcmm::encode_point(&p),
                        now,
                    );
                }
                if self.cursor < self.points.len() && ctx.timers_active() {
                    ctx.schedule(ctx.now() + TICK, WakeReason::Timer(T_TICK));
                }
            }
            _ => {}
        }
    }
}

/// Builds the simulated cluster for a config: topics, supervisor, virtual
/// topics (reactive), jobs, workload, and the failure schedule.
pub fn build_world(cfg: &RunConfig) -> Result<Sim, HarnessError> {
    cfg.validate()?;
    let sim_cfg = SimConfig {
        seed: cfg.seed,
        nodes: cfg.nodes,
        cores_per_node: cfg.cores_per_node,
        mailbox_capacity: cfg.mailbox_capacity,
        control_mailbox_capacity: 1 << 16,
        heartbeat_interval: cfg.heartbeat_interval,
        miss_threshold: cfg.miss_threshold,
        consume_cost: cfg.consume_cost,
        publish_cost: cfg.publish_cost,
        duration: cfg.duration_s * SECOND,
        quiesce_grace: cfg.quiesce_grace_s * SECOND,
    };
    let mut sim = Sim::new(sim_cfg, cfg.primary_job());

    sim.broker.create_topic(INPUT_TOPIC, cfg.partitions)?;
    match cfg.workload {
        Workload::Tcmm { .. } => {
            sim.broker
                .create_topic(MICRO_DELTAS_TOPIC, cfg.partitions)?;
            sim.broker
                .create_topic(MACRO_DELTAS_TOPIC, cfg.partitions)?;
        }
        Workload::Fixed { .. } => {
            sim.broker.create_topic(RESULTS_TOPIC, cfg.partitions)?;
        }
    }

    spawn_supervisor(&mut sim);

    let reactive = matches!(cfg.mode, Mode::Reactive { .. });
    if reactive {
        let producer_pool = ElasticPoolConfig {
            min_workers: 1,
            max_workers: 4,
            high_watermark: 256,
            low_watermark: 16,
            evaluation_period: cfg.evaluation_period,
            cooldown: cfg.cooldown,
        };
        create_virtual_topic(&mut sim, INPUT_TOPIC, producer_pool);
        match cfg.workload {
            Workload::Tcmm { .. } => {
                create_virtual_topic(&mut sim, MICRO_DELTAS_TOPIC, producer_pool);
                create_virtual_topic(&mut sim, MACRO_DELTAS_TOPIC, producer_pool);
            }
            Workload::Fixed { .. } => {
                create_virtual_topic(&mut sim, RESULTS_TOPIC, producer_pool);
            }
        }
    }

    match cfg.workload {
        Workload::Tcmm {
            micro,
            macro_params,
        } => {
            let micro_spec = JobSpec {
                job_id: MICRO_JOB.to_string(),
                input: INPUT_TOPIC.to_string(),
                output: MICRO_DELTAS_TOPIC.to_string(),
                stateful: true,
                batch_n: cfg.batch_n,
                mode: job_mode(cfg),
                factory: std::rc::Rc::new(move |index| Box::new(TcmmMicroLogic::new(index, micro))),
            };
            processing::start_job(&mut sim, &micro_spec)
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
            let macro_spec = JobSpec {
                job_id: MACRO_JOB.to_string(),
                input: MICRO_DELTAS_TOPIC.to_string(),
                output: MACRO_DELTAS_TOPIC.to_string(),
                stateful: true,
                batch_n: cfg.batch_n,
                mode: job_mode(cfg),
                factory: std::rc::Rc::new(move |_| Box::new(TcmmMacroLogic::new(macro_params))),
            };
            processing::start_job(&mut sim, &macro_spec)
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        }
        Workload::Fixed { process_cost } => {
            let spec = JobSpec {
                job_id: FIXED_JOB.to_string(),
                input: INPUT_TOPIC.to_string(),
                output: RESULTS_TOPIC.to_string(),
                stateful: false,
                batch_n: cfg.batch_n,
                mode: job_mode(cfg),
                factory: std::rc::Rc::new(move |_| Box::new(FixedCostLogic { process_cost })),
            };
            processing::start_job(&mut sim, &spec)
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        }
    }

    let points = load_points(cfg)?;
    match cfg.rate {
        None => {
            // Saturation regime: the whole workload is on the log at t=0.
            for p in &points {
                sim.broker.publish(
                    "preload",
                    INPUT_TOPIC,
                    Some(&taxi_key(p.taxi_id)),
                    &tcmm::encode_point(p),
                    0,
                )?;
            }
        }
        Some(rate) => {
            let source = LiveSource {
                points,
                cursor: 0,
                per_tick: (rate / 10).max(1),
            };
            let control = sim.control_node();
            sim.spawn("ingest", control, 16, false, false, None, Box::new(source));
        }
    }

    let plan = FailurePlan {
        probability: cfg.failure_probability,
        window: cfg.fail_window,
        downtime: cfg.downtime,
        seed: cfg.seed ^ 0xFA11_FA11,
    };
    for event in failure_schedule(&plan, cfg.nodes, cfg.duration_s * SECOND) {
        sim.schedule_node_kill(NodeId(event.node), event.kill_at);
        sim.schedule_node_restore(NodeId(event.node), event.restore_at);
    }
    Ok(sim)
}

fn load_points(cfg: &RunConfig) -> Result<Vec<TrajectoryPoint>, HarnessError> {
    match &cfg.input {
        InputSpec::Synth {
            taxis,
            points_per_taxi,
            hotspots,
        } => Ok(ingest::synth_trajectories(&SynthSpec {
            seed: cfg.seed,
            n_taxis: *taxis,
            points_per_taxi: *points_per_taxi,
            n_hotspots: *hotspots,
        })),
        InputSpec::TDrive(path) => {
            let mut points = Vec::new();
            let stats = ingest::load_file(path, |p| points.push(p))?;
            eprintln!(
                "loaded {} points from {:?} ({} malformed lines skipped)",
                stats.published, path, stats.malformed
            );
            Ok(points)
        }
    }
}

/// Runs a configured experiment to completion and collects its metrics.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    let mut sim = build_world(cfg)?;
    if cfg.pace_realtime {
        run_paced(&mut sim);
    } else {
        sim.run();
    }
    Ok(collect_output(cfg, &sim))
}

fn run_paced(sim: &mut Sim) {
    let wall_start = std::time::Instant::now();
    while let Some(due) = sim.peek_time() {
        let target = std::time::Duration::from_micros(due);
        let elapsed = wall_start.elapsed();
        if target > elapsed {
            std::thread::sleep(target - elapsed);
        }
        sim.step();
    }
}

pub fn collect_output(cfg: &RunConfig, sim: &Sim) -> RunOutput {
    let primary = cfg.primary_job();
    let view = sim.final_micro_view(primary);
    let flat = processing::flatten_view(&view);
    let mut top: Vec<(String, u64, f64, f64)> = flat
        .values()
        .map(|cf| {
            let c = cf.center();
            (cf.id.to_string(), cf.n, c[0], c[1])
        })
        .collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let clusters = ClusterSummary {
        count: flat.len() as u64,
        total_points: flat.values().map(|cf| cf.n).sum(),
        top: top.into_iter().take(10).collect(),
    };

    let (completions, unique, dups) = match sim.metrics.job(primary) {
        Some(j) => (j.completions.clone(), j.unique_count(), j.duplicates),
        None => (Vec::new(), 0, 0),
    };
    let metrics = RunMetrics::from_completions(cfg.duration_s, completions, unique, dups, clusters);

    let published: u64 = (0..cfg.partitions)
        .map(|p| sim.broker.end_offset(INPUT_TOPIC, p).unwrap_or(0))
        .sum();
    let macro_emissions: u64 = match cfg.workload {
        Workload::Tcmm { .. } => (0..cfg.partitions)
            .map(|p| sim.broker.end_offset(MACRO_DELTAS_TOPIC, p).unwrap_or(0))
            .sum(),
        Workload::Fixed { .. } => 0,
    };
    let job_counts = sim
        .metrics
        .jobs
        .iter()
        .map(|(k, v)| (k.clone(), (v.unique_count(), v.duplicates)))
        .collect();

    RunOutput {
        label: cfg.label(),
        metrics,
        gauges: sim.metrics.gauges.clone(),
        events: sim.run_events.clone(),
        published,
        job_counts,
        macro_emissions,
    }
}
