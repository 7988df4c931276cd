//! Virtual messaging layer: one virtual topic per backing topic, with a
//! consumer group per subscribing job (bounded by partition count) and an
//! elastic producer group. Virtual consumers drain partitions in batches and
//! forward messages to the job's task pool; commits follow processing
//! acknowledgements, so a crash anywhere replays unfinished offsets
//! (at-least-once). Producers publish on behalf of tasks, balanced round-robin.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::mailbox::{msg_id, Address, Body, EnvelopeKind, SendOutcome, WorkItem};
use crate::processing::{self, DispatchOutcome};
use crate::scaling::{evaluate_scaling, ElasticPoolConfig, ScalingDecision};
use crate::sim::{Component, Ctx, RespawnSpec, RunEvent, Sim, WakeReason};
use crate::time::Micros;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubscribeError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("consumer count {requested} exceeds partition count {partitions}")]
    TooManyConsumers { requested: u32, partitions: u32 },
    #[error("job {0:?} already subscribed to this topic")]
    DuplicateSubscription(String),
    #[error("consumer count must be at least 1")]
    ZeroConsumers,
}

#[derive(Debug)]
pub struct ConsumerSlot {
    pub index: u32,
    pub live_addr: Option<Address>,
}

#[derive(Debug)]
pub struct ConsumerGroupState {
    pub job: String,
    pub batch_n: u32,
    pub consumers: Vec<ConsumerSlot>,
}

#[derive(Debug)]
pub struct ProducerSlot {
    pub index: u32,
    pub live_addr: Option<Address>,
    pub retiring: bool,
}

/// Registry entry for one virtual topic: its producer group and the consumer
/// groups of subscribed jobs.
pub struct VirtualTopicState {
    pub topic: String,
    pub dispatcher_addr: Address,
    /// Overflow held by the producer group when every producer is busy or dead.
    pub group_queue: VecDeque<(Option<Vec<u8>>, Vec<u8>)>,
    pub producer_cfg: ElasticPoolConfig,
    pub producers: Vec<ProducerSlot>,
    pub next_producer: u32,
    /// Producer position the next round-robin scan starts from.
    pub rr_next: usize,
    pub last_scale: Option<Micros>,
    pub groups: BTreeMap<String, ConsumerGroupState>,
}

impl VirtualTopicState {
    pub fn live_producers(&self) -> u32 {
        self.producers
            .iter()
            .filter(|p| p.live_addr.is_some() && !p.retiring)
            .count() as u32
    }
}

fn consumer_name(topic: &str, job: &str, index: u32) -> String {
    format!("vc:{topic}:{job}:{index}")
}

fn producer_name(topic: &str, index: u32) -> String {
    format!("vp:{topic}:{index}")
}

/// Creates the virtual topic over an existing backing topic: a dispatcher on
/// the control node, the minimum producer pool, and its scaler.
pub fn create_virtual_topic(sim: &mut Sim, topic: &str, producer_cfg: ElasticPoolConfig) {
    assert!(
        !sim.vtopics.contains_key(topic),
        "one virtual topic per backing topic"
    );
    producer_cfg.validate().expect("valid producer pool config");
    let control = sim.control_node();
    let cap = sim.cfg.control_mailbox_capacity;
    let dispatcher_addr = sim.spawn(
        &format!("vpd:{topic}"),
        control,
        cap,
        false,
        false,
        None,
        Box::new(ProducerDispatcher {
            topic: topic.to_string(),
        }),
    );
    sim.vtopics.insert(
        topic.to_string(),
        VirtualTopicState {
            topic: topic.to_string(),
            dispatcher_addr,
            group_queue: VecDeque::new(),
            producer_cfg,
            producers: Vec::new(),
            next_producer: 0,
            rr_next: 0,
            last_scale: None,
            groups: BTreeMap::new(),
        },
    );
    for _ in 0..producer_cfg.min_workers {
        let index = sim.vtopics[topic].next_producer;
        let node = sim.least_loaded_node().expect("a node is up at start");
        spawn_producer(sim, topic, index, node);
    }
    let scaler = ProducerScaler {
        topic: topic.to_string(),
    };
    sim.spawn(
        &format!("vps:{topic}"),
        control,
        cap,
        false,
        false,
        None,
        Box::new(scaler),
    );
}

/// Subscribes a job: spawns `consumers` virtual consumers registered as broker
/// group "topic/job". The count is bounded by the backing partition count.
pub fn subscribe_job(
    sim: &mut Sim,
    topic: &str,
    job: &str,
    batch_n: u32,
    consumers: u32,
) -> Result<(), SubscribeError> {
    let partitions = sim
        .broker
        .partition_count(topic)
        .map_err(|_| SubscribeError::UnknownTopic(topic.to_string()))?;
    if consumers == 0 {
        return Err(SubscribeError::ZeroConsumers);
    }
    if consumers > partitions {
        return Err(SubscribeError::TooManyConsumers {
            requested: consumers,
            partitions,
        });
    }
    let vt = sim
        .vtopics
        .get_mut(topic)
        .unwrap_or_else(|| panic!("virtual topic {topic} not created"));
    if vt.groups.contains_key(job) {
        return Err(SubscribeError::DuplicateSubscription(job.to_string()));
    }
    vt.groups.insert(
        job.to_string(),
        ConsumerGroupState {
            job: job.to_string(),
            batch_n,
            consumers: Vec::new(),
        },
    );
    for index in 0..consumers {
        let node = sim.least_loaded_node().expect("a node is up at start");
        spawn_consumer(sim, topic, job, index, node);
    }
    Ok(())
}

pub fn spawn_consumer(
    sim: &mut Sim,
    topic: &str,
    job: &str,
    index: u32,
    node: crate::mailbox::NodeId,
) -> Address {
    let batch_n = sim.vtopics[topic].groups[job].batch_n;
    let state = VirtualConsumer::new(topic, job, index, batch_n);
    let name = consumer_name(topic, job, index);
    let cap = sim.cfg.control_mailbox_capacity;
    let addr = sim.spawn(
        &name,
        node,
        cap,
        true,
        true,
        Some(RespawnSpec::VConsumer {
            topic: topic.to_string(),
            job: job.to_string(),
            index,
        }),
        Box::new(state),
    );
    let group = sim
        .vtopics
        .get_mut(topic)
        .unwrap()
        .groups
        .get_mut(job)
        .unwrap();
    match group.consumers.iter_mut().find(|c| c.index == index) {
        Some(slot) => slot.live_addr = Some(addr),
        None => group.consumers.push(ConsumerSlot {
            index,
            live_addr: Some(addr),
        }),
    }
    addr
}

pub fn spawn_producer(
    sim: &mut Sim,
    topic: &str,
    index: u32,
    node: crate::mailbox::NodeId,
) -> Address {
    let vt = sim.vtopics.get_mut(topic).unwrap();
    vt.next_producer = vt.next_producer.max(index + 1);
    let name = producer_name(topic, index);
    let state = VirtualProducer {
        topic: topic.to_string(),
        index,
        busy: false,
        retiring: false,
        pending: None,
    };
    let cap = sim.cfg.mailbox_capacity;
    let addr = sim.spawn(
        &name,
        node,
        cap,
        true,
        true,
        Some(RespawnSpec::VProducer {
            topic: topic.to_string(),
            index,
        }),
        Box::new(state),
    );
    let vt = sim.vtopics.get_mut(topic).unwrap();
    match vt.producers.iter_mut().find(|p| p.index == index) {
        Some(slot) => {
            slot.live_addr = Some(addr);
            slot.retiring = false;
        }
        None => vt.producers.push(ProducerSlot {
            index,
            live_addr: Some(addr),
            retiring: false,
        }),
    }
    addr
}

pub fn mark_consumer_dead(sim: &mut Sim, topic: &str, job: &str, index: u32) {
    if let Some(group) = sim
        .vtopics
        .get_mut(topic)
        .and_then(|vt| vt.groups.get_mut(job))
    {
        if let Some(slot) = group.consumers.iter_mut().find(|c| c.index == index) {
            slot.live_addr = None;
        }
    }
}

pub fn mark_producer_dead(sim: &mut Sim, topic: &str, index: u32) {
    if let Some(vt) = sim.vtopics.get_mut(topic) {
        if let Some(slot) = vt.producers.iter_mut().find(|p| p.index == index) {
            slot.live_addr = None;
            slot.retiring = false;
        }
    }
}

/// Addresses of a job's live virtual consumers (for failure notices).
pub fn consumer_addresses(sim: &Sim, topic: &str, job: &str) -> Vec<Address> {
    sim.vtopics
        .get(topic)
        .and_then(|vt| vt.groups.get(job))
        .map(|g| g.consumers.iter().filter_map(|c| c.live_addr).collect())
        .unwrap_or_default()
}

const T_HEARTBEAT: u32 = 1;
const T_BATCH_DONE: u32 = 2;
const T_RETRY: u32 = 3;
const T_POLL: u32 = 4;
const T_PUBLISH_DONE: u32 = 5;
const T_FLUSH: u32 = 6;
const T_EVALUATE: u32 = 7;

const IDLE_POLL: Micros = 10_000;

#[derive(Debug, Clone, Copy)]
struct PendingDispatch {
    assignee: Address,
    consume_us: Micros,
    completed: bool,
}

/// Stateful consumer of one share of a topic's partitions. Cycles without
/// interruption: fetch up to n messages (m * t_c virtual time), hand them to
/// the task pool, then fetch again. Commits trail processing acknowledgements
/// so at-least-once holds across consumer, task, and node failures.
pub struct VirtualConsumer {
    topic: String,
    job: String,
    index: u32,
    batch_n: u32,
    group: String,
    next_offset: BTreeMap<u32, u64>,
    watermark: BTreeMap<u32, u64>,
    pending: BTreeMap<(u32, u64), PendingDispatch>,
    backlog: VecDeque<WorkItem>,
    consuming: Vec<WorkItem>,
    busy_consuming: bool,
    retry_armed: bool,
    generation_seen: u64,
    rr_partition: usize,
}

impl VirtualConsumer {
    pub fn new(topic: &str, job: &str, index: u32, batch_n: u32) -> Self {
        Self {
            topic: topic.to_string(),
            job: job.to_string(),
            index,
            batch_n,
            group: format!("{topic}/{job}"),
            next_offset: BTreeMap::new(),
            watermark: BTreeMap::new(),
            pending: BTreeMap::new(),
            backlog: VecDeque::new(),
            consuming: Vec::new(),
            busy_consuming: false,
            retry_armed: false,
            generation_seen: 0,
            rr_partition: 0,
        }
    }

    fn retry_delay(&self, ctx: &Ctx<'_>) -> Micros {
        // One evaluation period of the target pool: gives elastic scaling a
        // chance to absorb the load before the next attempt.
        match ctx.sim.pools.get(&self.job).map(|p| &p.mode) {
            Some(crate::processing::JobMode::Reactive { pool, .. }) => pool.evaluation_period,
            _ => 1_000_000,
        }
    }

    fn partitions(&mut self, ctx: &Ctx<'_>) -> Vec<u32> {
        let Some(assignment) = ctx.sim.broker.assignment(&self.group, &self.topic) else {
            return Vec::new();
        };
        let name = consumer_name(&self.topic, &self.job, self.index);
        let partitions = assignment.partitions_of(&name);
        if assignment.generation != self.generation_seen {
            self.generation_seen = assignment.generation;
            for p in &partitions {
                if !self.next_offset.contains_key(p) {
                    let committed = ctx
                        .sim
                        .broker
                        .fetch_committed(&self.group, &self.topic, *p)
                        .unwrap_or(0);
                    self.next_offset.insert(*p, committed);
                    self.watermark.entry(*p).or_insert(committed);
                }
            }
            self.next_offset.retain(|p, _| partitions.contains(p));
        }
        partitions
    }

    fn drain_control(&mut self, ctx: &mut Ctx<'_>) {
        while let Some(env) = ctx.receive() {
            match env.body {
                Body::Ack { partition, offset } => {
                    if let Some(p) = self.pending.get_mut(&(partition, offset)) {
                        p.completed = true;
                    }
                    self.advance_watermark(ctx, partition);
                }
                Body::FailureNotice { failed } => self.redispatch_for(ctx, failed),
                _ => {}
            }
        }
    }

    fn advance_watermark(&mut self, ctx: &mut Ctx<'_>, partition: u32) {
        let Some(mark) = self.watermark.get_mut(&partition) else {
            return;
        };
        let mut moved = false;
        while let Some(p) = self.pending.get(&(partition, *mark)) {
            if !p.completed {
                break;
            }
            self.pending.remove(&(partition, *mark));
            *mark += 1;
            moved = true;
        }
        if moved {
            let mark = *self.watermark.get(&partition).unwrap();
            let _ = ctx
                .sim
                .broker
                .commit_offset(&self.group, &self.topic, partition, mark);
        }
    }

    /// A task died: everything dispatched to that incarnation and not yet
    /// acknowledged goes back through the pool.
    fn redispatch_for(&mut self, ctx: &mut Ctx<'_>, failed: Address) {
        let lost: Vec<(u32, u64, Micros)> = self
            .pending
            .iter()
            .filter(|(_, p)| !p.completed && p.assignee == failed)
            .map(|((part, off), p)| (*part, *off, p.consume_us))
            .collect();
        let topic: Arc<str> = Arc::from(self.topic.as_str());
        for (partition, offset, consume_us) in lost {
            let Ok(msgs) = ctx.sim.broker.fetch(&self.topic, partition, offset, 1) else {
                continue;
            };
            let Some(m) = msgs.first() else { continue };
            self.backlog.push_back(WorkItem {
                topic: topic.clone(),
                partition,
                offset,
                key: m.key.clone(),
                payload: m.payload.clone(),
                msg_id: msg_id(partition, offset),
                consume_us,
                batch_size: self.batch_n,
                batch_index: 0,
                origin: Some(ctx.addr),
                redelivery: true,
            });
        }
    }

    /// The consumption loop: flush the backlog into the pool, then fetch the
    /// next batch; repeat until backpressure or an empty log pauses us.
    fn continue_flow(&mut self, ctx: &mut Ctx<'_>) {
        if self.busy_consuming {
            return;
        }
        loop {
            while let Some(item) = self.backlog.front() {
                match processing::dispatch(ctx.sim, &self.job, item.clone()) {
                    DispatchOutcome::Enqueued(assignee) => {
                        let item = self.backlog.pop_front().unwrap();
                        self.pending.insert(
                            (item.partition, item.offset),
                            PendingDispatch {
                                assignee,
                                consume_us: item.consume_us,
                                completed: false,
                            },
                        );
                    }
                    DispatchOutcome::MailboxFull | DispatchOutcome::NoWorkers => {
                        self.arm_retry(ctx);
                        return;
                    }
                }
            }
            if !self.fetch_batch(ctx) {
                return;
            }
        }
    }

    fn arm_retry(&mut self, ctx: &mut Ctx<'_>) {
        if !self.retry_armed && ctx.timers_active() {
            self.retry_armed = true;
            let delay = self.retry_delay(ctx);
            ctx.schedule(ctx.now() + delay, WakeReason::Timer(T_RETRY));
        }
    }

    /// Fetches up to n messages round-robin across assigned partitions and
    /// starts the m * t_c consume phase. Returns false when the loop should
    /// pause (nothing to fetch or no partitions).
    fn fetch_batch(&mut self, ctx: &mut Ctx<'_>) -> bool {
        let partitions = self.partitions(ctx);
        if partitions.is_empty() {
            if ctx.timers_active() {
                ctx.schedule(ctx.now() + IDLE_POLL, WakeReason::Timer(T_POLL));
            }
            return false;
        }
        let batch_start = ctx.now();
        let topic: Arc<str> = Arc::from(self.topic.as_str());
        let mut items = Vec::new();
        self.rr_partition = (self.rr_partition + 1) % partitions.len();
        let mut remaining = self.batch_n as usize;
        for step in 0..partitions.len() {
            if remaining == 0 {
                break;
            }
            let p = partitions[(self.rr_partition + step) % partitions.len()];
            let from = *self.next_offset.get(&p).unwrap_or(&0);
            let msgs = ctx
                .sim
                .broker
                .fetch(&self.topic, p, from, remaining)
                .unwrap_or_default();
            for m in msgs {
                items.push(WorkItem {
                    topic: topic.clone(),
                    partition: p,
                    offset: m.offset,
                    key: m.key.clone(),
                    payload: m.payload.clone(),
                    msg_id: msg_id(p, m.offset),
                    consume_us: batch_start,
                    batch_size: 0,
                    batch_index: 0,
                    origin: Some(ctx.addr),
                    redelivery: false,
                });
                self.next_offset.insert(p, m.offset + 1);
                remaining -= 1;
            }
        }
        let m = items.len() as u32;
        if m == 0 {
            if ctx.timers_active() {
                ctx.schedule(ctx.now() + IDLE_POLL, WakeReason::Timer(T_POLL));
            }
            return false;
        }
        for (i, item) in items.iter_mut().enumerate() {
            item.batch_size = m;
            item.batch_index = i as u32 + 1;
        }
        self.consuming = items;
        self.busy_consuming = true;
        let consume = u64::from(m) * ctx.sim.cfg.consume_cost;
        ctx.schedule(ctx.now() + consume, WakeReason::Timer(T_BATCH_DONE));
        false
    }
}

impl Component for VirtualConsumer {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start => {
                ctx.join_group_tracked(&self.group.clone(), &self.topic.clone());
                ctx.emit_heartbeat();
                let interval = ctx.sim.cfg.heartbeat_interval;
                ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_HEARTBEAT));
                self.continue_flow(ctx);
            }
            WakeReason::Delivery => {
                self.drain_control(ctx);
                self.continue_flow(ctx);
            }
            WakeReason::Timer(T_BATCH_DONE) => {
                self.busy_consuming = false;
                let batch = std::mem::take(&mut self.consuming);
                // Partitions revoked during the consume phase belong to their
                // new owner now; drop their undispatched messages.
                let owned = self.partitions(ctx);
                self.backlog
                    .extend(batch.into_iter().filter(|i| owned.contains(&i.partition)));
                self.continue_flow(ctx);
            }
            WakeReason::Timer(T_RETRY) => {
                self.retry_armed = false;
                self.continue_flow(ctx);
            }
            WakeReason::Timer(T_POLL) => self.continue_flow(ctx),
            WakeReason::Timer(T_HEARTBEAT) => {
                ctx.emit_heartbeat();
                if ctx.timers_active() {
                    let interval = ctx.sim.cfg.heartbeat_interval;
                    ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_HEARTBEAT));
                }
            }
            _ => {}
        }
    }
}

/// Accepts publish requests from tasks and spreads them round-robin over the
/// live producers; overflow is held in the group queue until a producer frees up.
struct ProducerDispatcher {
    topic: String,
}

impl ProducerDispatcher {
    fn flush(&mut self, ctx: &mut Ctx<'_>) {
        // Pull new requests into the group queue, then hand out round-robin.
        while let Some(env) = ctx.receive() {
            if let Body::Publish { key, payload } = env.body {
                ctx.sim
                    .vtopics
                    .get_mut(&self.topic)
                    .unwrap()
                    .group_queue
                    .push_back((key, payload));
            }
        }
        loop {
            let vt = ctx.sim.vtopics.get(&self.topic).unwrap();
            if vt.group_queue.is_empty() {
                return;
            }
            let candidates: Vec<(usize, Address)> = vt
                .producers
                .iter()
                .enumerate()
                .filter(|(_, p)| !p.retiring)
                .filter_map(|(pos, p)| p.live_addr.map(|a| (pos, a)))
                .collect();
            if candidates.is_empty() {
                // Every producer dead: hold messages, tell the supervisor.
                if let Some(sup) = ctx.sim.supervision.supervisor {
                    ctx.send(
                        sup,
                        EnvelopeKind::FailureNotice,
                        Body::FailureNotice { failed: ctx.addr },
                    );
                }
                self.arm_flush(ctx);
                return;
            }
            let n = ctx.sim.vtopics[&self.topic].producers.len();
            let start = ctx.sim.vtopics[&self.topic].rr_next % n;
            let (pos, addr) = *candidates
                .iter()
                .min_by_key(|(pos, _)| (*pos + n - start) % n)
                .unwrap();
            let (key, payload) = ctx
                .sim
                .vtopics
                .get_mut(&self.topic)
                .unwrap()
                .group_queue
                .pop_front()
                .unwrap();
            match ctx.send(
                addr,
                EnvelopeKind::Data,
                Body::Publish {
                    key: key.clone(),
                    payload: payload.clone(),
                },
            ) {
                SendOutcome::Enqueued => {
                    ctx.sim.vtopics.get_mut(&self.topic).unwrap().rr_next = pos + 1;
                }
                SendOutcome::MailboxFull => {
                    let vt = ctx.sim.vtopics.get_mut(&self.topic).unwrap();
                    vt.group_queue.push_front((key, payload));
                    self.arm_flush(ctx);
                    return;
                }
                SendOutcome::DeadLetter => {
                    let vt = ctx.sim.vtopics.get_mut(&self.topic).unwrap();
                    vt.group_queue.push_front((key, payload));
                    vt.producers[pos].live_addr = None;
                }
            }
        }
    }

    fn arm_flush(&mut self, ctx: &mut Ctx<'_>) {
        if ctx.timers_active() {
            ctx.schedule(ctx.now() + 100_000, WakeReason::Timer(T_FLUSH));
        }
    }
}

impl Component for ProducerDispatcher {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start | WakeReason::Delivery | WakeReason::Timer(T_FLUSH) => {
                self.flush(ctx)
            }
            _ => {}
        }
    }
}

/// Publishes one message per publish_cost of virtual time onto the backing topic.
struct VirtualProducer {
    topic: String,
    index: u32,
    busy: bool,
    retiring: bool,
    pending: Option<(Option<Vec<u8>>, Vec<u8>)>,
}

impl VirtualProducer {
    fn begin_next(&mut self, ctx: &mut Ctx<'_>) {
        if self.busy {
            return;
        }
        match ctx.receive_kind(EnvelopeKind::Data) {
            Some(env) => {
                if let Body::Publish { key, payload } = env.body {
                    self.pending = Some((key, payload));
                    self.busy = true;
                    let cost = ctx.sim.cfg.publish_cost;
                    ctx.schedule(ctx.now() + cost, WakeReason::Timer(T_PUBLISH_DONE));
                }
            }
            None => {
                if self.retiring {
                    let topic = self.topic.clone();
                    mark_producer_dead(ctx.sim, &topic, self.index);
                    ctx.retire_self();
                }
            }
        }
    }
}

impl Component for VirtualProducer {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start => {
                ctx.emit_heartbeat();
                let interval = ctx.sim.cfg.heartbeat_interval;
                ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_HEARTBEAT));
            }
            WakeReason::Delivery => {
                while let Some(env) = ctx.receive_kind(EnvelopeKind::Control) {
                    if matches!(env.body, Body::Retire) {
                        self.retiring = true;
                    }
                }
                self.begin_next(ctx);
            }
            WakeReason::Timer(T_PUBLISH_DONE) => {
                if let Some((key, payload)) = self.pending.take() {
                    let name = ctx.my_name().to_string();
                    let now = ctx.now();
                    let _ =
                        ctx.sim
                            .broker
                            .publish(&name, &self.topic, key.as_deref(), &payload, now);
                }
                self.busy = false;
                self.begin_next(ctx);
            }
            WakeReason::Timer(T_HEARTBEAT) => {
                ctx.emit_heartbeat();
                if ctx.timers_active() {
                    let interval = ctx.sim.cfg.heartbeat_interval;
                    ctx.schedule(ctx.now() + interval, WakeReason::Timer(T_HEARTBEAT));
                }
            }
            _ => {}
        }
    }
}

/// Elastic worker service for one producer group, sized by the group's
/// aggregate queue depth (held overflow plus producer mailboxes).
struct ProducerScaler {
    topic: String,
}

impl ProducerScaler {
    fn evaluate(&self, ctx: &mut Ctx<'_>) {
        let vt = ctx.sim.vtopics.get(&self.topic).unwrap();
        let cfg = vt.producer_cfg;
        let current = vt.live_producers();
        if current == 0 {
            return;
        }
        let depth = vt.group_queue.len() as u64
            + vt.producers
                .iter()
                .filter_map(|p| p.live_addr)
                .map(|a| ctx.sim.slot(a.component).mailbox.data_depth() as u64)
                .sum::<u64>();
        match evaluate_scaling(&cfg, depth, current, ctx.now(), vt.last_scale) {
            ScalingDecision::Hold => {}
            ScalingDecision::ScaleUp(k) => {
                let mut spawned = 0;
                for _ in 0..k {
                    let index = ctx.sim.vtopics[&self.topic].next_producer;
                    match ctx.sim.least_loaded_node() {
                        Some(node) => {
                            spawn_producer(ctx.sim, &self.topic, index, node);
                            spawned += 1;
                        }
                        None => {
                            let at = ctx.now();
                            ctx.sim.run_events.push(RunEvent::SpawnFailed {
                                pool: format!("vp:{}", self.topic),
                                at,
                            });
                            break;
                        }
                    }
                }
                if spawned > 0 {
                    ctx.sim
                        .record_scale(&format!("vp:{}", self.topic), current, current + spawned);
                    ctx.sim.vtopics.get_mut(&self.topic).unwrap().last_scale = Some(ctx.now());
                }
            }
            ScalingDecision::ScaleDown(k) => {
                let mut victims: Vec<(u32, Address)> = ctx.sim.vtopics[&self.topic]
                    .producers
                    .iter()
                    .filter(|p| !p.retiring)
                    .filter_map(|p| p.live_addr.map(|a| (p.index, a)))
                    .collect();
                victims.sort_by_key(|(index, _)| std::cmp::Reverse(*index));
                let mut retired = 0;
                for (index, addr) in victims.into_iter().take(k as usize) {
                    ctx.send(addr, EnvelopeKind::Control, Body::Retire);
                    let vt = ctx.sim.vtopics.get_mut(&self.topic).unwrap();
                    if let Some(slot) = vt.producers.iter_mut().find(|p| p.index == index) {
                        slot.retiring = true;
                    }
                    retired += 1;
                }
                if retired > 0 {
                    ctx.sim
                        .record_scale(&format!("vp:{}", self.topic), current, current - retired);
                    ctx.sim.vtopics.get_mut(&self.topic).unwrap().last_scale = Some(ctx.now());
                }
            }
        }
    }
}

impl Component for ProducerScaler {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason) {
        match reason {
            WakeReason::Start | WakeReason::Timer(T_EVALUATE) => {
                if matches!(reason, WakeReason::Timer(_)) {
                    self.evaluate(ctx);
                }
                let period = ctx.sim.vtopics[&self.topic].producer_cfg.evaluation_period;
                if ctx.timers_active() {
                    ctx.schedule(ctx.now() + period, WakeReason::Timer(T_EVALUATE));
                }
            }
            _ => {}
        }
    }
}
