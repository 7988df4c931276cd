//! Deterministic discrete-event runtime. Every logical thread (task, virtual
//! consumer, producer, supervisor, scaler) is a [`Component`] woken by events
//! from a single seeded queue over a virtual microsecond clock, so identical
//! configs and seeds replay identically. Nodes are simulated as component groups
//! with a fixed number of processing cores; killing a node closes its mailboxes
//! and drops the volatile state of everything resident on it.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::collections::{BinaryHeap, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::broker::Broker;
use crate::crdt::CrdtMap;
use crate::event_store::EventStore;
use crate::harness::metrics::MetricsRecorder;
use crate::mailbox::{
    Address, Body, ComponentId, Envelope, EnvelopeKind, Mailbox, NodeId, SendOutcome,
};
use crate::processing::{self, TaskPool};
use crate::supervision::SupervisionRecord;
use crate::tcmm::{MicroClusterCF, MicroClusterId};
use crate::time::{Micros, SECOND};
use crate::virtual_messaging::VirtualTopicState;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub nodes: u32,
    pub cores_per_node: u32,
    pub mailbox_capacity: usize,
    pub control_mailbox_capacity: usize,
    pub heartbeat_interval: Micros,
    pub miss_threshold: u32,
    /// Virtual time to consume one message off the messaging layer.
    pub consume_cost: Micros,
    /// Virtual time for a producer to publish one message.
    pub publish_cost: Micros,
    /// Metrics horizon; per-second series stop here.
    pub duration: Micros,
    /// Extra virtual time past the horizon for draining; periodic timers stop
    /// re-arming after duration + grace so the event queue empties.
    pub quiesce_grace: Micros,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            nodes: 3,
            cores_per_node: 2,
            mailbox_capacity: 1024,
            control_mailbox_capacity: 1 << 16,
            heartbeat_interval: 500_000,
            miss_threshold: 3,
            consume_cost: 1_000,
            publish_cost: 100,
            duration: 120 * SECOND,
            quiesce_grace: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WakeReason {
    Start,
    Delivery,
    Timer(u32),
    CoreGranted,
}

/// A logical thread. Interaction with the rest of the system happens only
/// through the [`Ctx`] passed to wakes.
pub trait Component {
    fn on_wake(&mut self, ctx: &mut Ctx<'_>, reason: WakeReason);
}

pub struct Ctx<'a> {
    pub sim: &'a mut Sim,
    pub me: ComponentId,
    pub addr: Address,
}

impl Ctx<'_> {
    pub fn now(&self) -> Micros {
        self.sim.now
    }

    pub fn receive(&mut self) -> Option<Envelope> {
        self.sim.slots[self.me.0 as usize].mailbox.pop()
    }

    pub fn receive_kind(&mut self, kind: EnvelopeKind) -> Option<Envelope> {
        self.sim.slots[self.me.0 as usize].mailbox.pop_kind(kind)
    }

    pub fn data_depth(&self) -> usize {
        self.sim.slots[self.me.0 as usize].mailbox.data_depth()
    }

    pub fn send(&mut self, to: Address, kind: EnvelopeKind, body: Body) -> SendOutcome {
        self.sim.send(Some(self.addr), to, kind, body)
    }

    pub fn schedule(&mut self, at: Micros, reason: WakeReason) {
        self.sim
            .schedule_wake(self.me, self.addr.incarnation, at, reason);
    }

    /// Periodic timers call this before re-arming; they wind down once the run
    /// is past its horizon plus grace so the event queue drains.
    pub fn timers_active(&self) -> bool {
        self.sim.now < self.sim.hard_stop()
    }

    pub fn request_core(&mut self) -> bool {
        self.sim.request_core(self.me)
    }

    pub fn release_core(&mut self) {
        self.sim.release_core(self.me)
    }

    /// True when another component on this node is waiting for a core.
    pub fn core_contended(&self) -> bool {
        let node = self.addr.node.0 as usize;
        !self.sim.nodes[node].waiters.is_empty()
    }

    pub fn emit_heartbeat(&mut self) {
        if let Some(sup) = self.sim.supervision.supervisor {
            self.send(sup, EnvelopeKind::Heartbeat, Body::Heartbeat);
        }
    }

    /// Join a broker consumer group with membership tied to this component's
    /// life: death or node failure leaves the group automatically.
    pub fn join_group_tracked(&mut self, group: &str, topic: &str) {
        let name = self.sim.slots[self.me.0 as usize].name.clone();
        self.sim
            .broker
            .join_group(group, topic, &name)
            .expect("topic exists");
        self.sim.slots[self.me.0 as usize].group_membership =
            Some((group.to_string(), topic.to_string(), name));
    }

    pub fn my_name(&self) -> &str {
        &self.sim.slots[self.me.0 as usize].name
    }

    /// Let-it-crash: stop heartbeating and drop this component's volatile state.
    pub fn crash(&mut self) {
        self.sim.kill_component(self.me, KillCause::Crash);
    }

    pub fn retire_self(&mut self) {
        self.sim.kill_component(self.me, KillCause::Retired);
    }

    pub fn is_alive(&self) -> bool {
        self.sim.slots[self.me.0 as usize].alive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillCause {
    NodeDown,
    Crash,
    Retired,
}

/// How the supervisor rebuilds a dead component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RespawnSpec {
    PoolWorker {
        job: String,
        index: u32,
    },
    VConsumer {
        topic: String,
        job: String,
        index: u32,
    },
    VProducer {
        topic: String,
        index: u32,
    },
}

pub struct Slot {
    pub name: String,
    pub node: NodeId,
    pub incarnation: u32,
    pub mailbox: Mailbox,
    pub alive: bool,
    pub retiring: bool,
    pub is_worker: bool,
    pub respawn: Option<RespawnSpec>,
    pub group_membership: Option<(String, String, String)>,
    state: Option<Box<dyn Component>>,
    wake_pending: bool,
    holding_core: bool,
}

#[derive(Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub up: bool,
    pub cores_total: u32,
    pub cores_free: u32,
    waiters: VecDeque<(ComponentId, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    NodeKilled {
        node: u32,
        at: Micros,
    },
    NodeRestored {
        node: u32,
        at: Micros,
    },
    ComponentKilled {
        name: String,
        at: Micros,
        cause: KillCause,
    },
    FailureDetected {
        name: String,
        at: Micros,
    },
    Respawned {
        name: String,
        node: u32,
        incarnation: u32,
        at: Micros,
        backoff: Micros,
    },
    ScaleChange {
        pool: String,
        from: u32,
        to: u32,
        at: Micros,
    },
    SpawnFailed {
        pool: String,
        at: Micros,
    },
}

#[derive(Debug, Default)]
pub struct RestartMeta {
    /// Consecutive-restart streak driving the exponential backoff.
    pub streak: u32,
    pub last_respawn: Option<Micros>,
    pub last_backoff: Micros,
    pub total_restarts: u32,
}

#[derive(Default)]
pub struct SupervisionTable {
    pub records: BTreeMap<ComponentId, SupervisionRecord>,
    pub meta: BTreeMap<ComponentId, RestartMeta>,
    pub supervisor: Option<Address>,
}

enum Event {
    Wake {
        comp: ComponentId,
        incarnation: u32,
        reason: WakeReason,
    },
    KillNode(NodeId),
    RestoreNode(NodeId),
    SupervisorRestart {
        comp: ComponentId,
    },
    MetricsTick,
}

struct Queued {
    at: Micros,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Shared state of one run: broker, nodes, component slots, state-management
/// services (event store + CRDT replicas), pools, metrics, and the event queue.
pub struct Sim {
    pub cfg: SimConfig,
    pub now: Micros,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    env_seq: u64,
    pub rng: ChaCha8Rng,
    pub broker: Broker,
    pub slots: Vec<Slot>,
    names: BTreeMap<String, ComponentId>,
    pub nodes: Vec<NodeState>,
    pub event_store: EventStore,
    /// Per-job shared CRDT store (the merged view replicas publish into).
    pub crdt_stores: BTreeMap<String, CrdtMap<MicroClusterId, MicroClusterCF>>,
    /// Per-task writer replicas, held by the state-management service keyed by
    /// component name. Dropped on death (volatile) and rebuilt by replay.
    pub task_replicas: BTreeMap<String, CrdtMap<MicroClusterId, MicroClusterCF>>,
    pub pools: BTreeMap<String, TaskPool>,
    pub vtopics: BTreeMap<String, VirtualTopicState>,
    pub supervision: SupervisionTable,
    pub metrics: MetricsRecorder,
    pub run_events: Vec<RunEvent>,
}

impl Sim {
    pub fn new(cfg: SimConfig, primary_job: &str) -> Self {
        use rand::SeedableRng;
        // Worker nodes 0..cfg.nodes plus one control node (no cores) hosting
        // the supervisor, scalers, and dispatchers; failure injection never
        // targets the control node.
        let nodes = (0..=cfg.nodes)
            .map(|i| {
                let cores = if i < cfg.nodes { cfg.cores_per_node } else { 0 };
                NodeState {
                    id: NodeId(i),
                    up: true,
                    cores_total: cores,
                    cores_free: cores,
                    waiters: VecDeque::new(),
                }
            })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let duration = cfg.duration;
        let mut sim = Self {
            cfg,
            now: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            env_seq: 0,
            rng,
            broker: Broker::new(),
            slots: Vec::new(),
            names: BTreeMap::new(),
            nodes,
            event_store: EventStore::new(),
            crdt_stores: BTreeMap::new(),
            task_replicas: BTreeMap::new(),
            pools: BTreeMap::new(),
            vtopics: BTreeMap::new(),
            supervision: SupervisionTable::default(),
            metrics: MetricsRecorder::new(primary_job),
            run_events: Vec::new(),
        };
        for s in 1..=(duration / SECOND) {
            sim.push(s * SECOND, Event::MetricsTick);
        }
        sim
    }

    pub fn hard_stop(&self) -> Micros {
        self.cfg.duration + self.cfg.quiesce_grace
    }

    fn push(&mut self, at: Micros, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq: self.seq,
            event,
        }));
    }

    pub fn address_of(&self, comp: ComponentId) -> Address {
        let slot = &self.slots[comp.0 as usize];
        Address {
            node: slot.node,
            component: comp,
            incarnation: slot.incarnation,
        }
    }

    pub fn lookup(&self, name: &str) -> Option<ComponentId> {
        self.names.get(name).copied()
    }

    pub fn slot(&self, comp: ComponentId) -> &Slot {
        &self.slots[comp.0 as usize]
    }

    /// Live worker components hosted per node; the placement load metric.
    pub fn node_load(&self, node: NodeId) -> usize {
        self.slots
            .iter()
            .filter(|s| s.node == node && s.alive && s.is_worker)
            .count()
    }

    pub fn control_node(&self) -> NodeId {
        NodeId(self.cfg.nodes)
    }

    fn is_worker_node(&self, node: NodeId) -> bool {
        node.0 < self.cfg.nodes
    }

    /// Least-loaded Up worker node, ties to the lower id. None when every
    /// worker node is down.
    pub fn least_loaded_node(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.up && self.is_worker_node(n.id))
            .map(|n| (self.node_load(n.id), n.id))
            .min()
            .map(|(_, id)| id)
    }

    /// Up worker nodes (the control node is not counted).
    pub fn nodes_up(&self) -> u32 {
        self.nodes
            .iter()
            .filter(|n| n.up && self.is_worker_node(n.id))
            .count() as u32
    }

    /// Spawns (or respawns) the named component on a node. Reusing a name bumps
    /// the incarnation and reopens the mailbox; the first spawn is incarnation 0.
    #[allow(clippy::too_many_arguments)]
    pub fn spawn(
        &mut self,
        name: &str,
        node: NodeId,
        capacity: usize,
        is_worker: bool,
        supervised: bool,
        respawn: Option<RespawnSpec>,
        state: Box<dyn Component>,
    ) -> Address {
        assert!(capacity >= 1);
        let comp = match self.names.get(name) {
            Some(id) => {
                let slot = &mut self.slots[id.0 as usize];
                assert!(!slot.alive, "component {name} already live");
                slot.incarnation += 1;
                slot.node = node;
                slot.mailbox.reopen(capacity);
                slot.alive = true;
                slot.retiring = false;
                slot.wake_pending = false;
                slot.holding_core = false;
                slot.state = Some(state);
                slot.respawn = respawn;
                slot.is_worker = is_worker;
                *id
            }
            None => {
                let id = ComponentId(self.slots.len() as u32);
                self.slots.push(Slot {
                    name: name.to_string(),
                    node,
                    incarnation: 0,
                    mailbox: Mailbox::new(capacity),
                    alive: true,
                    retiring: false,
                    is_worker,
                    respawn,
                    group_membership: None,
                    state: Some(state),
                    wake_pending: false,
                    holding_core: false,
                });
                self.names.insert(name.to_string(), id);
                id
            }
        };
        let addr = self.address_of(comp);
        if supervised {
            self.supervision.records.insert(
                comp,
                SupervisionRecord::new(
                    addr,
                    self.now,
                    self.cfg.heartbeat_interval,
                    self.cfg.miss_threshold,
                ),
            );
            self.supervision.meta.entry(comp).or_default();
        }
        self.schedule_wake(comp, addr.incarnation, self.now, WakeReason::Start);
        addr
    }

    /// Drops a component: mailbox closed, queued envelopes lost, group
    /// membership left, held core returned, writer replica discarded.
    pub fn kill_component(&mut self, comp: ComponentId, cause: KillCause) {
        let slot = &mut self.slots[comp.0 as usize];
        if !slot.alive {
            return;
        }
        slot.alive = false;
        slot.state = None;
        slot.mailbox.close();
        slot.wake_pending = false;
        slot.retiring = false;
        let name = slot.name.clone();
        let node = slot.node;
        let membership = slot.group_membership.take();
        let held_core = std::mem::take(&mut slot.holding_core);
        if let Some((group, topic, consumer)) = membership {
            let _ = self.broker.leave_group(&group, &topic, &consumer);
        }
        if held_core && self.nodes[node.0 as usize].up {
            self.free_core(node);
        }
        self.nodes[node.0 as usize]
            .waiters
            .retain(|(c, _)| *c != comp);
        self.task_replicas.remove(&name);
        if cause == KillCause::Retired {
            // Graceful retirement is not a failure; stop watching.
            self.supervision.records.remove(&comp);
            self.supervision.meta.remove(&comp);
        }
        self.run_events.push(RunEvent::ComponentKilled {
            name,
            at: self.now,
            cause,
        });
    }

    pub fn send(
        &mut self,
        from: Option<Address>,
        to: Address,
        kind: EnvelopeKind,
        body: Body,
    ) -> SendOutcome {
        let Some(slot) = self.slots.get(to.component.0 as usize) else {
            return SendOutcome::DeadLetter;
        };
        if slot.incarnation != to.incarnation || !slot.alive {
            return SendOutcome::DeadLetter;
        }
        self.env_seq += 1;
        let envelope = Envelope {
            id: self.env_seq,
            to,
            from,
            kind,
            body,
            enqueue_time: self.now,
        };
        let slot = &mut self.slots[to.component.0 as usize];
        let outcome = slot.mailbox.try_push(envelope);
        if outcome == SendOutcome::Enqueued && !slot.wake_pending {
            slot.wake_pending = true;
            let inc = slot.incarnation;
            self.push(
                self.now,
                Event::Wake {
                    comp: to.component,
                    incarnation: inc,
                    reason: WakeReason::Delivery,
                },
            );
        }
        outcome
    }

    pub fn schedule_wake(
        &mut self,
        comp: ComponentId,
        incarnation: u32,
        at: Micros,
        reason: WakeReason,
    ) {
        self.push(
            at.max(self.now),
            Event::Wake {
                comp,
                incarnation,
                reason,
            },
        );
    }

    pub fn schedule_node_kill(&mut self, node: NodeId, at: Micros) {
        self.push(at, Event::KillNode(node));
    }

    pub fn schedule_node_restore(&mut self, node: NodeId, at: Micros) {
        self.push(at, Event::RestoreNode(node));
    }

    pub fn schedule_supervisor_restart(&mut self, comp: ComponentId, at: Micros) {
        self.push(at.max(self.now), Event::SupervisorRestart { comp });
    }

    pub fn request_core(&mut self, comp: ComponentId) -> bool {
        if self.slots[comp.0 as usize].holding_core {
            return true;
        }
        let node = self.slots[comp.0 as usize].node;
        let state = &mut self.nodes[node.0 as usize];
        if !state.up {
            return false;
        }
        if state.cores_free > 0 {
            state.cores_free -= 1;
            self.slots[comp.0 as usize].holding_core = true;
            true
        } else {
            let inc = self.slots[comp.0 as usize].incarnation;
            if !state.waiters.iter().any(|(c, _)| *c == comp) {
                state.waiters.push_back((comp, inc));
            }
            false
        }
    }

    pub fn release_core(&mut self, comp: ComponentId) {
        let slot = &mut self.slots[comp.0 as usize];
        if !std::mem::take(&mut slot.holding_core) {
            return;
        }
        let node = slot.node;
        if self.nodes[node.0 as usize].up {
            self.free_core(node);
        }
    }

    /// Returns one core to the node, handing it straight to the next valid waiter.
    fn free_core(&mut self, node: NodeId) {
        while let Some((comp, inc)) = self.nodes[node.0 as usize].waiters.pop_front() {
            let slot = &self.slots[comp.0 as usize];
            if slot.alive && slot.incarnation == inc && slot.node == node {
                self.slots[comp.0 as usize].holding_core = true;
                self.push(
                    self.now,
                    Event::Wake {
                        comp,
                        incarnation: inc,
                        reason: WakeReason::CoreGranted,
                    },
                );
                return;
            }
        }
        self.nodes[node.0 as usize].cores_free += 1;
    }

    /// Kills a node: every resident component loses its volatile state and
    /// mailbox; cores and waiters are wiped with it.
    pub fn kill_node(&mut self, node: NodeId) {
        let state = &mut self.nodes[node.0 as usize];
        if !state.up {
            return;
        }
        state.up = false;
        state.waiters.clear();
        state.cores_free = 0;
        self.run_events.push(RunEvent::NodeKilled {
            node: node.0,
            at: self.now,
        });
        let resident: Vec<ComponentId> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.node == node && s.alive)
            .map(|(i, _)| ComponentId(i as u32))
            .collect();
        for comp in resident {
            self.kill_component(comp, KillCause::NodeDown);
        }
    }

    pub fn restore_node(&mut self, node: NodeId) {
        let state = &mut self.nodes[node.0 as usize];
        if state.up {
            return;
        }
        state.up = true;
        state.cores_free = state.cores_total;
        state.waiters.clear();
        self.run_events.push(RunEvent::NodeRestored {
            node: node.0,
            at: self.now,
        });
        processing::on_node_restored(self, node);
    }

    pub fn record_scale(&mut self, pool: &str, from: u32, to: u32) {
        let at = self.now;
        self.run_events.push(RunEvent::ScaleChange {
            pool: pool.to_string(),
            from,
            to,
            at,
        });
    }

    /// Runs the event loop to completion. Periodic timers stop re-arming after
    /// `duration + quiesce_grace`, so the queue eventually drains.
    pub fn run(&mut self) {
        while self.step() {}
    }

    pub fn peek_time(&self) -> Option<Micros> {
        self.queue.peek().map(|Reverse(q)| q.at)
    }

    pub fn step(&mut self) -> bool {
        let Some(Reverse(next)) = self.queue.pop() else {
            return false;
        };
        debug_assert!(next.at >= self.now);
        self.now = next.at;
        match next.event {
            Event::Wake {
                comp,
                incarnation,
                reason,
            } => self.dispatch_wake(comp, incarnation, reason),
            Event::KillNode(node) => self.kill_node(node),
            Event::RestoreNode(node) => self.restore_node(node),
            Event::SupervisorRestart { comp } => {
                crate::supervision::execute_restart(self, comp);
            }
            Event::MetricsTick => self.sample_gauges(),
        }
        true
    }

    fn dispatch_wake(&mut self, comp: ComponentId, incarnation: u32, reason: WakeReason) {
        let slot = &mut self.slots[comp.0 as usize];
        if slot.incarnation != incarnation || !slot.alive || slot.state.is_none() {
            return; // stale wake for a dead or replaced incarnation
        }
        if reason == WakeReason::Delivery {
            slot.wake_pending = false;
        }
        let mut state = slot.state.take().unwrap();
        let addr = self.address_of(comp);
        let mut ctx = Ctx {
            sim: self,
            me: comp,
            addr,
        };
        state.on_wake(&mut ctx, reason);
        // The component may have crashed or retired during the wake; only put
        // the state back if the slot is still this live incarnation.
        let slot = &mut self.slots[comp.0 as usize];
        if slot.alive && slot.incarnation == incarnation {
            slot.state = Some(state);
        }
    }

    fn sample_gauges(&mut self) {
        let t_s = self.now / SECOND;
        let nodes_up = self.nodes_up();
        let mut jobs = BTreeMap::new();
        for (job, pool) in &self.pools {
            jobs.insert(
                job.clone(),
                (
                    pool.live_count(self),
                    pool.active_count(self),
                    pool.total_data_depth(self),
                ),
            );
        }
        self.metrics.sample_gauges(t_s, nodes_up, jobs);
    }

    /// Final cluster state of a job: the shared CRDT store merged with every
    /// live writer replica still held by the state-management service.
    pub fn final_micro_view(&self, job: &str) -> CrdtMap<MicroClusterId, MicroClusterCF> {
        let mut view = CrdtMap::unowned();
        if let Some(store) = self.crdt_stores.get(job) {
            view.merge_from(store);
        }
        let prefix = format!("task:{job}:");
        for (name, replica) in &self.task_replicas {
            if name.starts_with(&prefix) {
                view.merge_from(replica);
            }
        }
        view
    }
}
