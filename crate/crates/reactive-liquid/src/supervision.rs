//! Heartbeat-based failure detection and restart backoff. A component is
//! declared failed once its silence exceeds miss_threshold * heartbeat_interval;
//! detection is idempotent until the component is restarted.

use std::collections::BTreeMap;

use crate::mailbox::{Address, ComponentId};
use crate::time::Micros;

#[derive(Debug, Clone)]
pub struct SupervisionRecord {
    pub supervised: Address,
    pub last_heartbeat: Micros,
    pub heartbeat_interval: Micros,
    pub miss_threshold: u32,
    pub restarts: u32,
    /// Set when a failure has been reported and not yet resolved by a restart.
    pub failed: bool,
}

impl SupervisionRecord {
    pub fn new(supervised: Address, registered_at: Micros, interval: Micros, misses: u32) -> Self {
        Self {
            supervised,
            last_heartbeat: registered_at,
            heartbeat_interval: interval,
            miss_threshold: misses,
            restarts: 0,
            failed: false,
        }
    }

    pub fn deadline_exceeded(&self, now: Micros) -> bool {
        now.saturating_sub(self.last_heartbeat)
            > u64::from(self.miss_threshold) * self.heartbeat_interval
    }
}

pub fn record_heartbeat(record: &mut SupervisionRecord, at: Micros) {
    record.last_heartbeat = record.last_heartbeat.max(at);
}

/// Returns addresses that newly crossed the failure deadline. Components already
/// reported stay silent until a restart clears their `failed` flag.
pub fn detect_failures(
    records: &mut BTreeMap<ComponentId, SupervisionRecord>,
    now: Micros,
) -> Vec<Address> {
    let mut failed = Vec::new();
    for record in records.values_mut() {
        if !record.failed && record.deadline_exceeded(now) {
            record.failed = true;
            failed.push(record.supervised);
        }
    }
    failed
}

pub const BACKOFF_BASE: Micros = 100_000; // 100 ms
pub const BACKOFF_FACTOR: u32 = 2;
pub const BACKOFF_CAP: Micros = 5_000_000; // 5 s

/// Delay before the k-th consecutive restart (1-based): base * factor^(k-1), capped.
pub fn restart_backoff(consecutive_restarts: u32) -> Micros {
    let k = consecutive_restarts.max(1) - 1;
    let mut delay = BACKOFF_BASE;
    for _ in 0..k {
        delay = delay.saturating_mul(u64::from(BACKOFF_FACTOR));
        if delay >= BACKOFF_CAP {
            return BACKOFF_CAP;
        }
    }
    delay.min(BACKOFF_CAP)
}

use crate::mailbox::{Body, EnvelopeKind};
use crate::processing;
use crate::sim::{Component, Ctx, RespawnSpec, RunEvent, Sim, WakeReason};
use crate::virtual_messaging;

/// A component alive longer than this since its last restart has proven
/// healthy: its consecutive-restart streak resets. Sized so a crash loop at
/// the backoff cap cannot slip under it.
pub fn streak_reset_window(heartbeat_interval: Micros, miss_threshold: u32) -> Micros {
    u64::from(miss_threshold) * heartbeat_interval + 3 * heartbeat_interval + BACKOFF_CAP
}

const T_DETECT: u32 = 1;

/// The supervision service: collects heartbeats, declares silent components
/// failed once past their deadline, and regenerates them on a healthy node
/// after an exponential backoff. Runs on the control node.
pub struct Supervisor;

impl Supervisor {
    fn drain_heartbeats(&mut self, ctx: &mut Ctx<'_>) {
        while let Some(env) = ctx.receive() {
            if env.kind == EnvelopeKind::Heartbeat {
                if let Some(from) = env.from {
                    if let Some(record) = ctx.sim.supervision.records.get_mut(&from.component) {
                        if record.supervised.incarnation == from.incarnation {
                            record_heartbeat(record, env.enqueue_time);
                        }
                    }
                }
            }
        }
    }

    fn detection_cycle(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        let failed = detect_failures(&mut ctx.sim.supervision.records, now);
        for failed_addr in failed {
            let comp = failed_addr.component;
            let name = ctx.sim.slot(comp).name.clone();
            ctx.sim
                .run_events
                .push(RunEvent::FailureDetected { name, at: now });
            // Pull the dead worker out of routing and tell the job's consumers
            // so unacknowledged messages get re-dispatched.
            match ctx.sim.slot(comp).respawn.clone() {
                Some(RespawnSpec::PoolWorker { job, index }) => {
                    processing::mark_task_dead(ctx.sim, &job, index);
                    if let Some(input) = ctx.sim.pools.get(&job).map(|p| p.input.clone()) {
                        for consumer in virtual_messaging::consumer_addresses(ctx.sim, &input, &job)
                        {
                            ctx.send(
                                consumer,
                                EnvelopeKind::FailureNotice,
                                Body::FailureNotice {
                                    failed: failed_addr,
                                },
                            );
                        }
                    }
                }
                Some(RespawnSpec::VConsumer { topic, job, index }) => {
                    virtual_messaging::mark_consumer_dead(ctx.sim, &topic, &job, index);
                }
                Some(RespawnSpec::VProducer { topic, index }) => {
                    virtual_messaging::mark_producer_dead(ctx.sim, &topic, index);
                }
                None => {}
            }
            let interval = ctx.sim.cfg.heartbeat_interval;
            let misses = ctx.sim.cfg.miss_threshold;
            let reset = streak_reset_window(interval, misses);
            let meta = ctx.sim.supervision.meta.entry(comp).or_default();
            if meta
                .last_respawn
                .is_some_and(|last| now.saturating_sub(last) > reset)
            {
                meta.streak = 0;
            }
            meta.streak += 1;
            let backoff = restart_backoff(meta.streak);
            meta.last_backoff = backoff;
            ctx.sim.schedule_supervisor_restart(comp, now + backoff);
        }
    }
}

impl Component for Supervisor {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start => {
                let interval = ctx.sim.cfg.heartbeat_interval;
                ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_DETECT));
            }
            WakeReason::Delivery => self.drain_heartbeats(ctx),
            WakeReason::Timer(T_DETECT) => {
                self.drain_heartbeats(ctx);
                self.detection_cycle(ctx);
                if ctx.timers_active() {
                    let interval = ctx.sim.cfg.heartbeat_interval;
                    ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_DETECT));
                }
            }
            _ => {}
        }
    }
}

pub fn spawn_supervisor(sim: &mut Sim) {
    let control = sim.control_node();
    let cap = sim.cfg.control_mailbox_capacity;
    let addr = sim.spawn(
        "supervisor",
        control,
        cap,
        false,
        false,
        None,
        Box::new(Supervisor),
    );
    sim.supervision.supervisor = Some(addr);
}

/// Executes a scheduled restart: respawn on the least-loaded healthy node with
/// a bumped incarnation. Stateful components rebuild from their event stream
/// and committed offsets inside their start hook. With no healthy node the
/// restart retries on the next detection cycle.
pub fn execute_restart(sim: &mut Sim, comp: crate::mailbox::ComponentId) {
    if sim.slot(comp).alive {
        return;
    }
    let Some(spec) = sim.slot(comp).respawn.clone() else {
        return;
    };
    let Some(node) = sim.least_loaded_node() else {
        // Nowhere to place it; retry on the next detection cycle (while the
        // run is still inside its horizon, so the queue can drain after).
        if sim.now < sim.hard_stop() {
            let retry_at = sim.now + sim.cfg.heartbeat_interval;
            sim.schedule_supervisor_restart(comp, retry_at);
        }
        return;
    };
    match spec {
        RespawnSpec::PoolWorker { job, index } => {
            processing::spawn_task(sim, &job, index, node);
        }
        RespawnSpec::VConsumer { topic, job, index } => {
            virtual_messaging::spawn_consumer(sim, &topic, &job, index, node);
        }
        RespawnSpec::VProducer { topic, index } => {
            virtual_messaging::spawn_producer(sim, &topic, index, node);
        }
    }
    let now = sim.now;
    let meta = sim.supervision.meta.entry(comp).or_default();
    meta.last_respawn = Some(now);
    meta.total_restarts += 1;
    let backoff = meta.last_backoff;
    let total = meta.total_restarts;
    if let Some(record) = sim.supervision.records.get_mut(&comp) {
        record.restarts = total;
    }
    let slot = sim.slot(comp);
    let (name, node_id, incarnation) = (slot.name.clone(), slot.node.0, slot.incarnation);
    sim.run_events.push(RunEvent::Respawned {
        name,
        node: node_id,
        incarnation,
        at: now,
        backoff,
    });
}
