//! Asynchronous messaging substrate: bounded mailboxes with location-transparent
//! addresses. Every inter-component interaction (data, acks, heartbeats, failure
//! notices) travels as an [`Envelope`]; overload surfaces as `MailboxFull`, never
//! as blocking.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::time::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ComponentId(pub u32);

/// Stable routing handle. `incarnation` bumps each time the component is
/// (re)spawned, so a send aimed at a dead incarnation is rejected rather than
/// misdelivered to the replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Address {
    pub node: NodeId,
    pub component: ComponentId,
    pub incarnation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeKind {
    Data,
    Control,
    Heartbeat,
    FailureNotice,
}

/// One workload message in flight from a consumer (or liquid fetch loop) to a task.
#[derive(Debug, Clone)]
pub struct WorkItem {
    pub topic: Arc<str>,
    pub partition: u32,
    pub offset: u64,
    pub key: Option<Arc<[u8]>>,
    pub payload: Arc<[u8]>,
    /// Stable per-topic id: partition in the high bits, offset in the low bits.
    pub msg_id: u64,
    /// Time the batch containing this message started consuming.
    pub consume_us: Micros,
    /// Size of that batch and this message's 1-based index within it.
    pub batch_size: u32,
    pub batch_index: u32,
    /// Consumer to acknowledge after processing (reactive mode only).
    pub origin: Option<Address>,
    pub redelivery: bool,
}

pub fn msg_id(partition: u32, offset: u64) -> u64 {
    (u64::from(partition) << 40) | offset
}

#[derive(Debug, Clone)]
pub enum Body {
    Work(WorkItem),
    /// Task -> consumer: this (partition, offset) finished processing.
    Ack {
        partition: u32,
        offset: u64,
    },
    /// Task -> virtual producer group: publish this on the backing topic.
    Publish {
        key: Option<Vec<u8>>,
        payload: Vec<u8>,
    },
    Heartbeat,
    FailureNotice {
        failed: Address,
    },
    /// Pool -> worker: drain your mailbox, then stop.
    Retire,
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub id: u64,
    pub to: Address,
    pub from: Option<Address>,
    pub kind: EnvelopeKind,
    pub body: Body,
    pub enqueue_time: Micros,
}

/// Outcome of a send; sends never block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Enqueued,
    MailboxFull,
    DeadLetter,
}

/// Bounded multi-producer, single-consumer queue. A single FIFO gives
/// per-sender FIFO delivery; interleaving across senders is the (deterministic)
/// enqueue order.
#[derive(Debug)]
pub struct Mailbox {
    queue: VecDeque<Envelope>,
    capacity: usize,
    open: bool,
    data_depth: usize,
}

impl Mailbox {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "mailbox capacity must be positive");
        Self {
            queue: VecDeque::new(),
            capacity,
            open: true,
            data_depth: 0,
        }
    }

    pub fn try_push(&mut self, envelope: Envelope) -> SendOutcome {
        if !self.open {
            return SendOutcome::DeadLetter;
        }
        if self.queue.len() >= self.capacity {
            return SendOutcome::MailboxFull;
        }
        if envelope.kind == EnvelopeKind::Data {
            self.data_depth += 1;
        }
        self.queue.push_back(envelope);
        SendOutcome::Enqueued
    }

    pub fn pop(&mut self) -> Option<Envelope> {
        let envelope = self.queue.pop_front()?;
        if envelope.kind == EnvelopeKind::Data {
            self.data_depth -= 1;
        }
        Some(envelope)
    }

    /// Pops the next envelope of the given kind, preserving order of the rest.
    pub fn pop_kind(&mut self, kind: EnvelopeKind) -> Option<Envelope> {
        let idx = self.queue.iter().position(|e| e.kind == kind)?;
        let envelope = self.queue.remove(idx)?;
        if envelope.kind == EnvelopeKind::Data {
            self.data_depth -= 1;
        }
        Some(envelope)
    }

    pub fn depth(&self) -> usize {
        self.queue.len()
    }

    /// Workload depth: heartbeats and control traffic never count toward the
    /// elastic-scaling signal.
    pub fn data_depth(&self) -> usize {
        self.data_depth
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Closing drops queued envelopes: mailbox contents are volatile state.
    pub fn close(&mut self) {
        self.open = false;
        self.queue.clear();
        self.data_depth = 0;
    }

    pub fn reopen(&mut self, capacity: usize) {
        self.queue.clear();
        self.data_depth = 0;
        self.capacity = capacity;
        self.open = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn addr(c: u32) -> Address {
        Address {
            node: NodeId(0),
            component: ComponentId(c),
            incarnation: 0,
        }
    }

    fn heartbeat(id: u64, from: u32) -> Envelope {
        Envelope {
            id,
            to: addr(9),
            from: Some(addr(from)),
            kind: EnvelopeKind::Heartbeat,
            body: Body::Heartbeat,
            enqueue_time: 0,
        }
    }

    fn data(id: u64, from: u32) -> Envelope {
        Envelope {
            kind: EnvelopeKind::Data,
            body: Body::Ack {
                partition: 0,
                offset: id,
            },
            ..heartbeat(id, from)
        }
    }

    #[test]
    #[should_panic(expected = "capacity must be positive")]
    fn zero_capacity_is_rejected() {
        let _ = Mailbox::new(0);
    }

    #[test]
    fn capacity_bounds_and_full_signal() {
        let mut mb = Mailbox::new(2);
        assert_eq!(mb.try_push(data(1, 0)), SendOutcome::Enqueued);
        assert_eq!(mb.try_push(data(2, 0)), SendOutcome::Enqueued);
        assert_eq!(mb.try_push(data(3, 0)), SendOutcome::MailboxFull);
        assert_eq!(mb.depth(), 2);
    }

    #[test]
    fn closed_mailbox_dead_letters() {
        let mut mb = Mailbox::new(4);
        mb.try_push(data(1, 0));
        mb.close();
        assert_eq!(mb.depth(), 0);
        assert_eq!(mb.try_push(data(2, 0)), SendOutcome::DeadLetter);
    }

    #[test]
    fn fifo_per_sender_and_depth_counts() {
        let mut mb = Mailbox::new(16);
        mb.try_push(data(1, 7));
        mb.try_push(heartbeat(2, 8));
        mb.try_push(data(3, 7));
        assert_eq!(mb.depth(), 3);
        assert_eq!(mb.data_depth(), 2);
        assert_eq!(mb.pop().unwrap().id, 1);
        assert_eq!(mb.pop().unwrap().id, 2);
        assert_eq!(mb.pop().unwrap().id, 3);
        assert!(mb.pop().is_none());
        assert_eq!(mb.data_depth(), 0);
    }

    #[test]
    fn pop_kind_skips_other_traffic() {
        let mut mb = Mailbox::new(16);
        mb.try_push(data(1, 0));
        mb.try_push(heartbeat(2, 0));
        mb.try_push(data(3, 0));
        assert_eq!(mb.pop_kind(EnvelopeKind::Heartbeat).unwrap().id, 2);
        assert_eq!(mb.pop().unwrap().id, 1);
        assert_eq!(mb.pop().unwrap().id, 3);
    }

    proptest! {
        /// Delivery is at-most-once and preserves each sender's send order,
        /// regardless of how pushes and pops interleave.
        #[test]
        fn at_most_once_and_sender_order(ops in proptest::collection::vec((0u8..3, 0u32..3), 1..200)) {
            let mut mb = Mailbox::new(8);
            let mut next_id = 0u64;
            let mut sent: Vec<Vec<u64>> = vec![Vec::new(); 3];
            let mut received: Vec<Vec<u64>> = vec![Vec::new(); 3];
            let mut all_received = std::collections::BTreeSet::new();
            for (op, sender) in ops {
                if op < 2 {
                    next_id += 1;
                    if mb.try_push(data(next_id, sender)) == SendOutcome::Enqueued {
                        sent[sender as usize].push(next_id);
                    }
                } else if let Some(e) = mb.pop() {
                    prop_assert!(all_received.insert(e.id), "duplicate delivery");
                    let s = e.from.unwrap().component.0 as usize;
                    received[s].push(e.id);
                }
            }
            while let Some(e) = mb.pop() {
                prop_assert!(all_received.insert(e.id));
                received[e.from.unwrap().component.0 as usize].push(e.id);
            }
            for s in 0..3 {
                prop_assert_eq!(&sent[s], &received[s]);
            }
        }
    }
}
