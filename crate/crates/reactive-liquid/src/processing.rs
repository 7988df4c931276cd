//! Processing layer: jobs split into tasks behind a load-balancing pool.
//! Reactive tasks drain their mailboxes message by message and are fed by the
//! virtual messaging layer; liquid tasks consume broker partitions directly in
//! strict fetch-batch / process-all / commit cycles. Task processing occupies a
//! node core for the message's modeled cost.

use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;

use thiserror::Error;

use crate::crdt::CrdtMap;
use crate::mailbox::{msg_id, Address, Body, EnvelopeKind, NodeId, SendOutcome, WorkItem};
use crate::scaling::{evaluate_scaling, ElasticPoolConfig, ScalingDecision};
use crate::sim::{Component, Ctx, RespawnSpec, RunEvent, Sim, WakeReason};
use crate::tcmm::{MicroClusterCF, MicroClusterId};
use crate::time::Micros;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JobError {
    #[error("job input and output topic must differ")]
    InputEqualsOutput,
    #[error("duplicate job id {0:?}")]
    DuplicateJob(String),
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("liquid mode needs at least one task")]
    NoTasks,
    #[error("subscription rejected: {0}")]
    Subscription(String),
}

/// Raised by job logic to signal a poison message; the task lets it crash.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("job logic failed: {0}")]
pub struct LogicError(pub String);

/// Everything one processed message produces: its modeled core cost, output
/// messages, an optional state-change event, and an optional cluster-state
/// write for the shared CRDT replica.
#[derive(Debug, Default)]
pub struct StepResult {
    pub cost: Micros,
    pub outputs: Vec<(Option<Vec<u8>>, Vec<u8>)>,
    pub state_event: Option<Vec<u8>>,
    pub crdt_put: Option<(MicroClusterId, MicroClusterCF)>,
}

/// A job's per-message transformation, pure given the task-local state it owns.
pub trait JobLogic {
    fn apply(&mut self, item: &WorkItem, now: Micros) -> Result<StepResult, LogicError>;

    /// Rebuilds state from one replayed event; returns the CRDT write to
    /// re-apply so replica versions match the pre-crash sequence.
    fn restore(&mut self, event: &[u8]) -> Option<(MicroClusterId, MicroClusterCF)>;

    /// Period of background work (e.g. macro-clustering epochs), if any.
    fn timer_period(&self) -> Option<Micros> {
        None
    }

    /// Periodic work over the job's merged cluster view.
    fn on_timer(
        &mut self,
        _now: Micros,
        _seed_base: u64,
        _merged: &BTreeMap<MicroClusterId, MicroClusterCF>,
    ) -> Option<StepResult> {
        None
    }

    /// Incarnation of the hosting task, set before replay on every (re)spawn.
    fn set_incarnation(&mut self, _incarnation: u32) {}
}

/// Builds a fresh logic instance for the task slot with the given index.
pub type LogicFactory = Rc<dyn Fn(u32) -> Box<dyn JobLogic>>;

/// Identity pass-through with a constant modeled processing cost.
pub struct FixedCostLogic {
    pub process_cost: Micros,
}

impl JobLogic for FixedCostLogic {
    fn apply(&mut self, item: &WorkItem, _now: Micros) -> Result<StepResult, LogicError> {
        Ok(StepResult {
            cost: self.process_cost,
            outputs: vec![(item.key.as_ref().map(|k| k.to_vec()), item.payload.to_vec())],
            state_event: None,
            crdt_put: None,
        })
    }

    fn restore(&mut self, _event: &[u8]) -> Option<(MicroClusterId, MicroClusterCF)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobMode {
    Liquid {
        tasks: u32,
    },
    Reactive {
        pool: ElasticPoolConfig,
        consumers: u32,
    },
}

#[derive(Clone)]
pub struct JobSpec {
    pub job_id: String,
    pub input: String,
    pub output: String,
    pub stateful: bool,
    pub batch_n: u32,
    pub mode: JobMode,
    pub factory: LogicFactory,
}

pub struct PoolSlot {
    pub index: u32,
    pub live_addr: Option<Address>,
    pub retiring: bool,
}

/// Shared pool state: task roster, dispatch cursor, and scaling bookkeeping.
pub struct TaskPool {
    pub job: String,
    pub input: String,
    pub output: String,
    pub stateful: bool,
    pub batch_n: u32,
    pub mode: JobMode,
    pub factory: LogicFactory,
    pub slots: Vec<PoolSlot>,
    pub next_index: u32,
    /// Dispatch position the next tie-break scan starts from.
    pub rr_next: usize,
    pub last_scale: Option<Micros>,
    /// Liquid tasks are bound to a home node and only return with it.
    pub liquid_homes: Vec<(u32, NodeId)>,
}

impl TaskPool {
    pub fn group(&self) -> String {
        format!("{}/{}", self.input, self.job)
    }

    pub fn live_count(&self, sim: &Sim) -> u32 {
        self.slots
            .iter()
            .filter(|s| s.live_addr.is_some() && !s.retiring)
            .filter(|s| {
                sim.lookup(&task_name(&self.job, s.index))
                    .is_some_and(|c| sim.slot(c).alive)
            })
            .count() as u32
    }

    /// Liquid: live tasks holding at least one partition. Reactive: live tasks.
    pub fn active_count(&self, sim: &Sim) -> u32 {
        match self.mode {
            JobMode::Reactive { .. } => self.live_count(sim),
            JobMode::Liquid { .. } => {
                let Some(assignment) = sim.broker.assignment(&self.group(), &self.input) else {
                    return 0;
                };
                self.slots
                    .iter()
                    .filter(|s| s.live_addr.is_some())
                    .filter(|s| {
                        !assignment
                            .partitions_of(&task_name(&self.job, s.index))
                            .is_empty()
                    })
                    .count() as u32
            }
        }
    }

    pub fn total_data_depth(&self, sim: &Sim) -> u64 {
        self.slots
            .iter()
            .filter_map(|s| s.live_addr)
            .map(|addr| sim.slot(addr.component).mailbox.data_depth() as u64)
            .sum()
    }

    pub fn max_live_index(&self) -> Option<u32> {
        self.slots
            .iter()
            .filter(|s| s.live_addr.is_some() && !s.retiring)
            .map(|s| s.index)
            .max()
    }
}

pub fn task_name(job: &str, index: u32) -> String {
    format!("task:{job}:{index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchOutcome {
    Enqueued(Address),
    MailboxFull,
    NoWorkers,
}

/// Sends the work item to the live task with the smallest data queue, breaking
/// ties round-robin. `MailboxFull` means every live task is full (the minimum
/// was full); a stale address found dead is pruned and dispatch retries.
pub fn dispatch(sim: &mut Sim, job: &str, item: WorkItem) -> DispatchOutcome {
    loop {
        let pool = &sim.pools[job];
        let mut candidates: Vec<(usize, Address, usize)> = Vec::new();
        for (pos, slot) in pool.slots.iter().enumerate() {
            if slot.retiring {
                continue;
            }
            if let Some(addr) = slot.live_addr {
                let depth = sim.slot(addr.component).mailbox.data_depth();
                candidates.push((pos, addr, depth));
            }
        }
        if candidates.is_empty() {
            return DispatchOutcome::NoWorkers;
        }
        let min_depth = candidates.iter().map(|(_, _, d)| *d).min().unwrap();
        let n = pool.slots.len();
        let start = pool.rr_next % n;
        let chosen = candidates
            .iter()
            .filter(|(_, _, d)| *d == min_depth)
            .map(|(pos, addr, _)| (*pos, *addr))
            // Cyclic scan from the position after the last pick.
            .min_by_key(|(pos, _)| (*pos + n - start) % n)
            .unwrap();
        match sim.send(None, chosen.1, EnvelopeKind::Data, Body::Work(item.clone())) {
            SendOutcome::Enqueued => {
                sim.pools.get_mut(job).unwrap().rr_next = chosen.0 + 1;
                return DispatchOutcome::Enqueued(chosen.1);
            }
            SendOutcome::MailboxFull => return DispatchOutcome::MailboxFull,
            SendOutcome::DeadLetter => {
                // Stale routing entry: prune and retry with the rest.
                sim.pools.get_mut(job).unwrap().slots[chosen.0].live_addr = None;
            }
        }
    }
}

const T_HEARTBEAT: u32 = 1;
const T_WORK_DONE: u32 = 2;
const T_LOGIC: u32 = 3;
const T_SHARE: u32 = 4;
const T_OUTBOX: u32 = 5;
const T_POLL: u32 = 6;
const T_CONSUME_DONE: u32 = 7;

/// How often a task merges its writer replica into the job's shared CRDT store.
pub const CRDT_SHARE_PERIOD: Micros = 2_000_000;
/// Retry delay when the producer-group queue pushes back.
const OUTBOX_RETRY: Micros = 1_000_000;
/// Poll back-off when a liquid task finds its partitions drained.
const IDLE_POLL: Micros = 10_000;

enum PendingWork {
    Message {
        item: WorkItem,
        result: StepResult,
        queue_wait: Micros,
    },
    TimerWork {
        result: StepResult,
    },
}

/// Message-driven elastic worker: processes one mailbox envelope at a time,
/// holding a node core for each message's modeled cost, acknowledging the
/// originating consumer after completion.
pub struct ReactiveTask {
    job: String,
    index: u32,
    logic: Box<dyn JobLogic>,
    stateful: bool,
    output: String,
    busy: bool,
    pending: Option<PendingWork>,
    pending_timer: bool,
    retiring: bool,
    outbox: VecDeque<(Option<Vec<u8>>, Vec<u8>)>,
    outbox_blocked: bool,
}

impl ReactiveTask {
    pub fn new(
        job: &str,
        index: u32,
        logic: Box<dyn JobLogic>,
        stateful: bool,
        output: &str,
    ) -> Self {
        Self {
            job: job.to_string(),
            index,
            logic,
            stateful,
            output: output.to_string(),
            busy: false,
            pending: None,
            pending_timer: false,
            retiring: false,
            outbox: VecDeque::new(),
            outbox_blocked: false,
        }
    }

    fn name(&self) -> String {
        task_name(&self.job, self.index)
    }

    fn start(&mut self, ctx: &mut Ctx<'_>) {
        let name = self.name();
        self.logic.set_incarnation(ctx.addr.incarnation);
        ctx.sim
            .task_replicas
            .insert(name.clone(), CrdtMap::new(&name));
        if self.stateful {
            replay_into(ctx.sim, &name, self.logic.as_mut());
        }
        ctx.emit_heartbeat();
        let interval = ctx.sim.cfg.heartbeat_interval;
        ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_HEARTBEAT));
        if let Some(period) = self.logic.timer_period() {
            ctx.schedule(ctx.now() + period, WakeReason::Timer(T_LOGIC));
        }
        ctx.schedule(ctx.now() + CRDT_SHARE_PERIOD, WakeReason::Timer(T_SHARE));
        self.try_begin(ctx);
    }

    fn drain_control(&mut self, ctx: &mut Ctx<'_>) {
        while let Some(env) = ctx.receive_kind(EnvelopeKind::Control) {
            if let Body::Retire = env.body {
                self.retiring = true;
            }
        }
    }

    fn try_begin(&mut self, ctx: &mut Ctx<'_>) {
        if self.busy {
            return;
        }
        if !self.outbox.is_empty() {
            self.flush_outbox(ctx);
            if !self.outbox.is_empty() {
                return; // blocked on the producer group; retry timer is armed
            }
        }
        if self.retiring && ctx.data_depth() == 0 && self.outbox.is_empty() {
            self.finish_retirement(ctx);
            return;
        }
        if (self.pending_timer || ctx.data_depth() > 0) && ctx.request_core() {
            self.begin_next(ctx);
        }
    }

    fn begin_next(&mut self, ctx: &mut Ctx<'_>) {
        debug_assert!(!self.busy);
        if self.pending_timer {
            self.pending_timer = false;
            let merged = flatten_view(&ctx.sim.final_micro_view(&self.job));
            let seed_base = ctx.sim.cfg.seed;
            if let Some(result) = self.logic.on_timer(ctx.now(), seed_base, &merged) {
                let done_at = ctx.now() + result.cost;
                self.pending = Some(PendingWork::TimerWork { result });
                self.busy = true;
                ctx.schedule(done_at, WakeReason::Timer(T_WORK_DONE));
                return;
            }
            // Nothing to do this epoch; fall through to data work.
        }
        let Some(env) = ctx.receive_kind(EnvelopeKind::Data) else {
            ctx.release_core();
            return;
        };
        let Body::Work(item) = env.body else {
            unreachable!("data envelopes carry work items")
        };
        let queue_wait = ctx.now() - env.enqueue_time;
        match self.logic.apply(&item, ctx.now()) {
            Err(_) => {
                // Let it crash: the in-flight message stays unacknowledged and
                // is re-dispatched once the failure is detected.
                ctx.crash();
            }
            Ok(result) => {
                let done_at = ctx.now() + result.cost;
                self.pending = Some(PendingWork::Message {
                    item,
                    result,
                    queue_wait,
                });
                self.busy = true;
                ctx.schedule(done_at, WakeReason::Timer(T_WORK_DONE));
            }
        }
    }

    fn finish_work(&mut self, ctx: &mut Ctx<'_>) {
        let Some(pending) = self.pending.take() else {
            return;
        };
        self.busy = false;
        match pending {
            PendingWork::Message {
                item,
                result,
                queue_wait,
            } => {
                let process_us = result.cost;
                self.commit_result(ctx, result);
                if let Some(origin) = item.origin {
                    ctx.send(
                        origin,
                        EnvelopeKind::Control,
                        Body::Ack {
                            partition: item.partition,
                            offset: item.offset,
                        },
                    );
                }
                let now = ctx.now();
                ctx.sim.metrics.record_completion(
                    &self.job,
                    item.msg_id,
                    item.consume_us,
                    now,
                    queue_wait,
                    process_us,
                    item.batch_size,
                    item.batch_index,
                    item.redelivery,
                );
            }
            PendingWork::TimerWork { result } => {
                self.commit_result(ctx, result);
            }
        }
        // Keep the core while there is uncontended work; yield to the back of
        // the queue when someone else is waiting.
        let more = self.pending_timer || ctx.data_depth() > 0;
        if more && self.outbox.is_empty() && !self.retiring {
            if ctx.core_contended() {
                ctx.release_core();
                if ctx.request_core() {
                    self.begin_next(ctx);
                }
            } else {
                self.begin_next(ctx);
            }
        } else {
            ctx.release_core();
            self.try_begin(ctx);
        }
    }

    fn commit_result(&mut self, ctx: &mut Ctx<'_>, result: StepResult) {
        let name = self.name();
        if let Some(event) = &result.state_event {
            ctx.sim
                .event_store
                .append(&name, event)
                .expect("event append");
        }
        if let Some((id, cf)) = result.crdt_put {
            if let Some(replica) = ctx.sim.task_replicas.get_mut(&name) {
                replica.put(&name, id, cf).expect("own origin put");
            }
        }
        for out in result.outputs {
            self.outbox.push_back(out);
        }
        if !self.outbox.is_empty() {
            self.flush_outbox(ctx);
        }
    }

    fn flush_outbox(&mut self, ctx: &mut Ctx<'_>) {
        let Some(dispatcher) = ctx
            .sim
            .vtopics
            .get(&self.output)
            .map(|vt| vt.dispatcher_addr)
        else {
            self.outbox.clear(); // no virtual topic: output is dropped
            return;
        };
        while let Some((key, payload)) = self.outbox.front() {
            let body = Body::Publish {
                key: key.clone(),
                payload: payload.clone(),
            };
            match ctx.send(dispatcher, EnvelopeKind::Data, body) {
                SendOutcome::Enqueued => {
                    self.outbox.pop_front();
                }
                _ => {
                    if !self.outbox_blocked && ctx.timers_active() {
                        self.outbox_blocked = true;
                        ctx.schedule(ctx.now() + OUTBOX_RETRY, WakeReason::Timer(T_OUTBOX));
                    }
                    return;
                }
            }
        }
    }

    fn share_replica(&self, ctx: &mut Ctx<'_>) {
        let name = self.name();
        if let Some(replica) = ctx.sim.task_replicas.get(&name) {
            let replica = replica.clone();
            ctx.sim
                .crdt_stores
                .entry(self.job.clone())
                .or_default()
                .merge_from(&replica);
        }
    }

    fn finish_retirement(&mut self, ctx: &mut Ctx<'_>) {
        self.share_replica(ctx);
        finish_retire(ctx.sim, &self.job, self.index);
        ctx.retire_self();
    }
}

impl Component for ReactiveTask {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start => self.start(ctx),
            WakeReason::Delivery => {
                self.drain_control(ctx);
                self.try_begin(ctx);
            }
            WakeReason::CoreGranted => {
                if !self.busy {
                    self.begin_next(ctx);
                }
            }
            WakeReason::Timer(T_WORK_DONE) => self.finish_work(ctx),
            WakeReason::Timer(T_HEARTBEAT) => {
                ctx.emit_heartbeat();
                if ctx.timers_active() {
                    let interval = ctx.sim.cfg.heartbeat_interval;
                    ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_HEARTBEAT));
                }
            }
            WakeReason::Timer(T_LOGIC) => {
                self.pending_timer = true;
                if let Some(period) = self.logic.timer_period() {
                    if ctx.timers_active() {
                        ctx.schedule(ctx.now() + period, WakeReason::Timer(T_LOGIC));
                    }
                }
                self.try_begin(ctx);
            }
            WakeReason::Timer(T_SHARE) => {
                self.share_replica(ctx);
                if ctx.timers_active() {
                    ctx.schedule(ctx.now() + CRDT_SHARE_PERIOD, WakeReason::Timer(T_SHARE));
                }
            }
            WakeReason::Timer(T_OUTBOX) => {
                self.outbox_blocked = false;
                self.flush_outbox(ctx);
                self.try_begin(ctx);
            }
            WakeReason::Timer(_) => {}
        }
    }
}

enum LiquidPhase {
    Idle,
    Consuming,
    Processing,
}

/// Partition-bound batch worker: fetch up to n messages from its assigned
/// partitions, process them all, commit, fetch the next batch. The whole cycle
/// holds one core; message i of a batch of m completes m*t_c + i*t_p after the
/// batch started.
pub struct LiquidTask {
    job: String,
    index: u32,
    logic: Box<dyn JobLogic>,
    stateful: bool,
    output: String,
    batch_n: u32,
    group: String,
    input: String,
    next_offsets: BTreeMap<u32, u64>,
    generation_seen: u64,
    rr_partition: usize,
    phase: LiquidPhase,
    batch: VecDeque<WorkItem>,
    batch_commits: BTreeMap<u32, u64>,
    pending: Option<PendingWork>,
    pending_timer: bool,
}

impl LiquidTask {
    pub fn new(
        job: &str,
        index: u32,
        logic: Box<dyn JobLogic>,
        stateful: bool,
        input: &str,
        output: &str,
        batch_n: u32,
    ) -> Self {
        Self {
            job: job.to_string(),
            index,
            logic,
            stateful,
            output: output.to_string(),
            batch_n,
            group: format!("{input}/{job}"),
            input: input.to_string(),
            next_offsets: BTreeMap::new(),
            generation_seen: 0,
            rr_partition: 0,
            phase: LiquidPhase::Idle,
            batch: VecDeque::new(),
            batch_commits: BTreeMap::new(),
            pending: None,
            pending_timer: false,
        }
    }

    fn name(&self) -> String {
        task_name(&self.job, self.index)
    }

    fn start(&mut self, ctx: &mut Ctx<'_>) {
        let name = self.name();
        self.logic.set_incarnation(ctx.addr.incarnation);
        ctx.sim
            .task_replicas
            .insert(name.clone(), CrdtMap::new(&name));
        if self.stateful {
            replay_into(ctx.sim, &name, self.logic.as_mut());
        }
        ctx.join_group_tracked(&self.group, &self.input);
        if let Some(period) = self.logic.timer_period() {
            ctx.schedule(ctx.now() + period, WakeReason::Timer(T_LOGIC));
        }
        ctx.schedule(ctx.now() + CRDT_SHARE_PERIOD, WakeReason::Timer(T_SHARE));
        self.begin_cycle(ctx);
    }

    fn my_partitions(&mut self, ctx: &Ctx<'_>) -> Vec<u32> {
        let Some(assignment) = ctx.sim.broker.assignment(&self.group, &self.input) else {
            return Vec::new();
        };
        let name = task_name(&self.job, self.index);
        let partitions = assignment.partitions_of(&name);
        if assignment.generation != self.generation_seen {
            self.generation_seen = assignment.generation;
            // Newly owned partitions resume at the committed offset; offsets of
            // partitions we lost are dropped.
            let mut fresh = BTreeMap::new();
            for p in &partitions {
                let at = match self.next_offsets.get(p) {
                    Some(off) => *off,
                    None => ctx
                        .sim
                        .broker
                        .fetch_committed(&self.group, &self.input, *p)
                        .unwrap_or(0),
                };
                fresh.insert(*p, at);
            }
            self.next_offsets = fresh;
        }
        partitions
    }

    fn begin_cycle(&mut self, ctx: &mut Ctx<'_>) {
        self.phase = LiquidPhase::Idle;
        let partitions = self.my_partitions(ctx);
        if partitions.is_empty() {
            ctx.release_core();
            if ctx.timers_active() {
                ctx.schedule(ctx.now() + IDLE_POLL, WakeReason::Timer(T_POLL));
            }
            return;
        }
        if !ctx.request_core() {
            return; // resumes on CoreGranted
        }
        if self.pending_timer {
            self.pending_timer = false;
            let merged = flatten_view(&ctx.sim.final_micro_view(&self.job));
            let seed_base = ctx.sim.cfg.seed;
            if let Some(result) = self.logic.on_timer(ctx.now(), seed_base, &merged) {
                let done_at = ctx.now() + result.cost;
                self.pending = Some(PendingWork::TimerWork { result });
                self.phase = LiquidPhase::Processing;
                ctx.schedule(done_at, WakeReason::Timer(T_WORK_DONE));
                return;
            }
        }
        self.fetch_batch(ctx, partitions);
    }

    fn fetch_batch(&mut self, ctx: &mut Ctx<'_>, partitions: Vec<u32>) {
        let batch_start = ctx.now();
        self.batch.clear();
        self.batch_commits.clear();
        self.rr_partition = (self.rr_partition + 1) % partitions.len();
        let topic: std::sync::Arc<str> = std::sync::Arc::from(self.input.as_str());
        let mut remaining = self.batch_n as usize;
        for step in 0..partitions.len() {
            if remaining == 0 {
                break;
            }
            let p = partitions[(self.rr_partition + step) % partitions.len()];
            let from = *self.next_offsets.get(&p).unwrap_or(&0);
            let msgs = ctx
                .sim
                .broker
                .fetch(&self.input, p, from, remaining)
                .unwrap_or_default();
            for m in msgs {
                self.batch.push_back(WorkItem {
                    topic: topic.clone(),
                    partition: p,
                    offset: m.offset,
                    key: m.key.clone(),
                    payload: m.payload.clone(),
                    msg_id: msg_id(p, m.offset),
                    consume_us: batch_start,
                    batch_size: 0, // patched below
                    batch_index: 0,
                    origin: None,
                    redelivery: false,
                });
                self.next_offsets.insert(p, m.offset + 1);
                self.batch_commits.insert(p, m.offset + 1);
                remaining -= 1;
            }
        }
        let m = self.batch.len() as u32;
        if m == 0 {
            ctx.release_core();
            if ctx.timers_active() {
                ctx.schedule(ctx.now() + IDLE_POLL, WakeReason::Timer(T_POLL));
            }
            return;
        }
        for (i, item) in self.batch.iter_mut().enumerate() {
            item.batch_size = m;
            item.batch_index = i as u32 + 1;
        }
        self.phase = LiquidPhase::Consuming;
        let consume = u64::from(m) * ctx.sim.cfg.consume_cost;
        ctx.schedule(ctx.now() + consume, WakeReason::Timer(T_CONSUME_DONE));
    }

    fn process_next(&mut self, ctx: &mut Ctx<'_>) {
        let Some(item) = self.batch.pop_front() else {
            self.finish_batch(ctx);
            return;
        };
        match self.logic.apply(&item, ctx.now()) {
            Err(_) => ctx.crash(),
            Ok(result) => {
                let done_at = ctx.now() + result.cost;
                self.pending = Some(PendingWork::Message {
                    item,
                    result,
                    queue_wait: 0,
                });
                ctx.schedule(done_at, WakeReason::Timer(T_WORK_DONE));
            }
        }
    }

    fn finish_work(&mut self, ctx: &mut Ctx<'_>) {
        let Some(pending) = self.pending.take() else {
            return;
        };
        match pending {
            PendingWork::Message { item, result, .. } => {
                let process_us = result.cost;
                self.commit_result(ctx, result);
                let now = ctx.now();
                ctx.sim.metrics.record_completion(
                    &self.job,
                    item.msg_id,
                    item.consume_us,
                    now,
                    0,
                    process_us,
                    item.batch_size,
                    item.batch_index,
                    item.redelivery,
                );
                self.process_next(ctx);
            }
            PendingWork::TimerWork { result } => {
                self.commit_result(ctx, result);
                self.after_cycle(ctx);
            }
        }
    }

    fn finish_batch(&mut self, ctx: &mut Ctx<'_>) {
        // Per-batch checkpoint: commit only after the whole batch processed.
        for (p, next) in std::mem::take(&mut self.batch_commits) {
            let _ = ctx
                .sim
                .broker
                .commit_offset(&self.group, &self.input, p, next);
        }
        self.after_cycle(ctx);
    }

    fn after_cycle(&mut self, ctx: &mut Ctx<'_>) {
        if ctx.core_contended() {
            ctx.release_core();
            if ctx.request_core() {
                self.begin_cycle(ctx);
            }
            // else: CoreGranted will resume the cycle
        } else {
            self.begin_cycle(ctx);
        }
    }

    fn commit_result(&mut self, ctx: &mut Ctx<'_>, result: StepResult) {
        let name = self.name();
        if let Some(event) = &result.state_event {
            ctx.sim
                .event_store
                .append(&name, event)
                .expect("event append");
        }
        if let Some((id, cf)) = result.crdt_put {
            if let Some(replica) = ctx.sim.task_replicas.get_mut(&name) {
                replica.put(&name, id, cf).expect("own origin put");
            }
        }
        for (key, payload) in result.outputs {
            let _ =
                ctx.sim
                    .broker
                    .publish(&name, &self.output, key.as_deref(), &payload, ctx.sim.now);
        }
    }

    fn share_replica(&self, ctx: &mut Ctx<'_>) {
        let name = self.name();
        if let Some(replica) = ctx.sim.task_replicas.get(&name) {
            let replica = replica.clone();
            ctx.sim
                .crdt_stores
                .entry(self.job.clone())
                .or_default()
                .merge_from(&replica);
        }
    }
}

impl Component for LiquidTask {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start => self.start(ctx),
            WakeReason::Delivery => {} // liquid tasks pull from the broker
            WakeReason::CoreGranted => {
                if matches!(self.phase, LiquidPhase::Idle) {
                    // Core granted after a wait: run the cycle without
                    // re-requesting (we already hold the core).
                    self.begin_cycle(ctx);
                }
            }
            WakeReason::Timer(T_POLL) => {
                if matches!(self.phase, LiquidPhase::Idle) {
                    self.begin_cycle(ctx);
                }
            }
            WakeReason::Timer(T_CONSUME_DONE) => {
                // A rebalance may have revoked partitions while we consumed;
                // drop their unprocessed messages so the new owner (resuming
                // from the committed offset) is the only processor.
                let owned = self.my_partitions(ctx);
                self.batch.retain(|item| owned.contains(&item.partition));
                self.batch_commits.retain(|p, _| owned.contains(p));
                self.phase = LiquidPhase::Processing;
                self.process_next(ctx);
            }
            WakeReason::Timer(T_WORK_DONE) => self.finish_work(ctx),
            WakeReason::Timer(T_LOGIC) => {
                self.pending_timer = true;
                if let Some(period) = self.logic.timer_period() {
                    if ctx.timers_active() {
                        ctx.schedule(ctx.now() + period, WakeReason::Timer(T_LOGIC));
                    }
                }
            }
            WakeReason::Timer(T_SHARE) => {
                self.share_replica(ctx);
                if ctx.timers_active() {
                    ctx.schedule(ctx.now() + CRDT_SHARE_PERIOD, WakeReason::Timer(T_SHARE));
                }
            }
            WakeReason::Timer(_) => {}
        }
    }
}

/// Replays the task's event stream through the logic, re-applying CRDT writes
/// so the writer replica's versions match the original sequence exactly.
fn replay_into(sim: &mut Sim, name: &str, logic: &mut dyn JobLogic) {
    let events: Vec<Vec<u8>> = sim
        .event_store
        .stream(name)
        .map(|s| s.iter().map(|e| e.to_vec()).collect())
        .unwrap_or_default();
    for event in events {
        if let Some((id, cf)) = logic.restore(&event) {
            if let Some(replica) = sim.task_replicas.get_mut(name) {
                replica.put(name, id, cf).expect("own origin put");
            }
        }
    }
}

/// Flattens a merged CRDT view into one cluster per id, keeping the summary
/// with the most absorbed points when replicas disagree transiently.
pub fn flatten_view(
    view: &CrdtMap<MicroClusterId, MicroClusterCF>,
) -> BTreeMap<MicroClusterId, MicroClusterCF> {
    let mut out: BTreeMap<MicroClusterId, MicroClusterCF> = BTreeMap::new();
    for ((_, id), versioned) in view.iter() {
        match out.get(id) {
            Some(existing) if existing.n >= versioned.value.n => {}
            _ => {
                out.insert(*id, versioned.value);
            }
        }
    }
    out
}

/// Starts a job: validates the job spec, registers the pool, and spawns tasks.
/// Reactive jobs also subscribe a virtual consumer group and start a scaler.
pub fn start_job(sim: &mut Sim, spec: &JobSpec) -> Result<(), JobError> {
    if spec.input == spec.output {
        return Err(JobError::InputEqualsOutput);
    }
    if sim.pools.contains_key(&spec.job_id) {
        return Err(JobError::DuplicateJob(spec.job_id.clone()));
    }
    sim.broker
        .topic(&spec.input)
        .map_err(|_| JobError::UnknownTopic(spec.input.clone()))?;
    sim.broker
        .topic(&spec.output)
        .map_err(|_| JobError::UnknownTopic(spec.output.clone()))?;

    let pool = TaskPool {
        job: spec.job_id.clone(),
        input: spec.input.clone(),
        output: spec.output.clone(),
        stateful: spec.stateful,
        batch_n: spec.batch_n,
        mode: spec.mode.clone(),
        factory: spec.factory.clone(),
        slots: Vec::new(),
        next_index: 0,
        rr_next: 0,
        last_scale: None,
        liquid_homes: Vec::new(),
    };
    sim.pools.insert(spec.job_id.clone(), pool);
    sim.crdt_stores
        .insert(spec.job_id.clone(), CrdtMap::unowned());

    match &spec.mode {
        JobMode::Liquid { tasks } => {
            if *tasks == 0 {
                return Err(JobError::NoTasks);
            }
            let workers = sim.cfg.nodes;
            for i in 0..*tasks {
                let node = NodeId(i % workers);
                sim.pools
                    .get_mut(&spec.job_id)
                    .unwrap()
                    .liquid_homes
                    .push((i, node));
                spawn_task(sim, &spec.job_id, i, node);
            }
        }
        JobMode::Reactive {
            pool: cfg,
            consumers,
        } => {
            if let Err(e) = crate::virtual_messaging::subscribe_job(
                sim,
                &spec.input,
                &spec.job_id,
                spec.batch_n,
                *consumers,
            ) {
                sim.pools.remove(&spec.job_id);
                sim.crdt_stores.remove(&spec.job_id);
                return Err(JobError::Subscription(e.to_string()));
            }
            for _ in 0..cfg.min_workers {
                let index = sim.pools[&spec.job_id].next_index;
                let node = sim.least_loaded_node().expect("a node is up at start");
                spawn_task(sim, &spec.job_id, index, node);
            }
            let scaler = PoolScaler {
                job: spec.job_id.clone(),
            };
            let control = sim.control_node();
            let cap = sim.cfg.control_mailbox_capacity;
            sim.spawn(
                &format!("scaler:{}", spec.job_id),
                control,
                cap,
                false,
                false,
                None,
                Box::new(scaler),
            );
        }
    }
    Ok(())
}

/// Spawns (or respawns) the pool worker with this slot index on the node.
pub fn spawn_task(sim: &mut Sim, job: &str, index: u32, node: NodeId) -> Address {
    let pool = sim.pools.get_mut(job).unwrap();
    pool.next_index = pool.next_index.max(index + 1);
    let (factory, stateful, input, output, batch_n, reactive) = (
        pool.factory.clone(),
        pool.stateful,
        pool.input.clone(),
        pool.output.clone(),
        pool.batch_n,
        matches!(pool.mode, JobMode::Reactive { .. }),
    );
    let logic = factory(index);
    let name = task_name(job, index);
    let capacity = sim.cfg.mailbox_capacity;
    let addr = if reactive {
        let state = ReactiveTask::new(job, index, logic, stateful, &output);
        sim.spawn(
            &name,
            node,
            capacity,
            true,
            true,
            Some(RespawnSpec::PoolWorker {
                job: job.to_string(),
                index,
            }),
            Box::new(state),
        )
    } else {
        let state = LiquidTask::new(job, index, logic, stateful, &input, &output, batch_n);
        sim.spawn(&name, node, capacity, true, false, None, Box::new(state))
    };
    let pool = sim.pools.get_mut(job).unwrap();
    match pool.slots.iter_mut().find(|s| s.index == index) {
        Some(slot) => {
            slot.live_addr = Some(addr);
            slot.retiring = false;
        }
        None => pool.slots.push(PoolSlot {
            index,
            live_addr: Some(addr),
            retiring: false,
        }),
    }
    addr
}

/// Marks the pool routing entry dead (called on failure detection).
pub fn mark_task_dead(sim: &mut Sim, job: &str, index: u32) {
    if let Some(pool) = sim.pools.get_mut(job) {
        if let Some(slot) = pool.slots.iter_mut().find(|s| s.index == index) {
            slot.live_addr = None;
            slot.retiring = false;
        }
    }
}

fn finish_retire(sim: &mut Sim, job: &str, index: u32) {
    if let Some(pool) = sim.pools.get_mut(job) {
        if let Some(slot) = pool.slots.iter_mut().find(|s| s.index == index) {
            slot.live_addr = None;
            slot.retiring = false;
        }
    }
}

/// Node-bound liquid recovery: when a node comes back, its home tasks respawn
/// and resume from their committed offsets.
pub fn on_node_restored(sim: &mut Sim, node: NodeId) {
    let mut to_spawn: Vec<(String, u32)> = Vec::new();
    for (job, pool) in &sim.pools {
        if !matches!(pool.mode, JobMode::Liquid { .. }) {
            continue;
        }
        for (index, home) in &pool.liquid_homes {
            if *home == node {
                let dead = pool
                    .slots
                    .iter()
                    .find(|s| s.index == *index)
                    .is_none_or(|s| s.live_addr.is_none());
                if dead {
                    to_spawn.push((job.clone(), *index));
                }
            }
        }
    }
    for (job, index) in to_spawn {
        spawn_task(sim, &job, index, node);
    }
}

/// Elastic worker service for one reactive pool: evaluates the workload queue
/// depth every period and resizes toward the watermark target.
pub struct PoolScaler {
    pub job: String,
}

/// Applies a scaling decision to the pool: ScaleUp spawns workers on the
/// least-loaded live nodes; ScaleDown retires the newest workers, which drain
/// their mailboxes before closing. With no live node to spawn on, the pool is
/// left unchanged and the failure is reported to the supervisor.
pub fn resize_pool(sim: &mut Sim, job: &str, decision: ScalingDecision) {
    let current = sim.pools[job].live_count(sim);
    match decision {
        ScalingDecision::Hold => {}
        ScalingDecision::ScaleUp(k) => {
            let mut spawned = 0;
            for _ in 0..k {
                let index = sim.pools[job].next_index;
                match sim.least_loaded_node() {
                    Some(node) => {
                        spawn_task(sim, job, index, node);
                        spawned += 1;
                    }
                    None => {
                        let at = sim.now;
                        sim.run_events.push(RunEvent::SpawnFailed {
                            pool: job.to_string(),
                            at,
                        });
                        if let Some(sup) = sim.supervision.supervisor {
                            sim.send(
                                None,
                                sup,
                                EnvelopeKind::FailureNotice,
                                Body::FailureNotice { failed: sup },
                            );
                        }
                        break;
                    }
                }
            }
            if spawned > 0 {
                sim.record_scale(job, current, current + spawned);
                sim.pools.get_mut(job).unwrap().last_scale = Some(sim.now);
            }
        }
        ScalingDecision::ScaleDown(k) => {
            // Retire newest-first; they drain their mailboxes before closing.
            let mut victims: Vec<(u32, Address)> = sim.pools[job]
                .slots
                .iter()
                .filter(|s| !s.retiring)
                .filter_map(|s| s.live_addr.map(|a| (s.index, a)))
                .collect();
            victims.sort_by_key(|(index, _)| std::cmp::Reverse(*index));
            let mut retired = 0;
            for (index, addr) in victims.into_iter().take(k as usize) {
                sim.send(None, addr, EnvelopeKind::Control, Body::Retire);
                let pool = sim.pools.get_mut(job).unwrap();
                if let Some(slot) = pool.slots.iter_mut().find(|s| s.index == index) {
                    slot.retiring = true;
                }
                retired += 1;
            }
            if retired > 0 {
                sim.record_scale(job, current, current - retired);
                sim.pools.get_mut(job).unwrap().last_scale = Some(sim.now);
            }
        }
    }
}

impl PoolScaler {
    fn evaluate(&self, ctx: &mut Ctx<'_>) {
        let Some(pool) = ctx.sim.pools.get(&self.job) else {
            return;
        };
        let JobMode::Reactive { pool: cfg, .. } = pool.mode.clone() else {
            return;
        };
        let depth = pool.total_data_depth(ctx.sim);
        let current = pool.live_count(ctx.sim);
        if current == 0 {
            return; // nothing live; the supervisor is rebuilding the pool
        }
        let last = pool.last_scale;
        let decision = evaluate_scaling(&cfg, depth, current, ctx.now(), last);
        resize_pool(ctx.sim, &self.job, decision);
    }
}

const T_EVALUATE: u32 = 10;

impl Component for PoolScaler {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start => {
                let period = match &ctx.sim.pools.get(&self.job).map(|p| p.mode.clone()) {
                    Some(JobMode::Reactive { pool, .. }) => pool.evaluation_period,
                    _ => return,
                };
                ctx.schedule(ctx.now() + period, WakeReason::Timer(T_EVALUATE));
            }
            WakeReason::Timer(T_EVALUATE) => {
                self.evaluate(ctx);
                let period = match &ctx.sim.pools.get(&self.job).map(|p| p.mode.clone()) {
                    Some(JobMode::Reactive { pool, .. }) => pool.evaluation_period,
                    _ => return,
                };
                if ctx.timers_active() {
                    ctx.schedule(ctx.now() + period, WakeReason::Timer(T_EVALUATE));
                }
            }
            _ => {}
        }
    }
}
