//! A desk-scale stream-processing testbed. The messaging layer is an in-process
//! partitioned publish/subscribe log with consumer groups. On top of it run two
//! processing architectures:
//!
//! - **liquid**: a fixed set of tasks per job, each consuming broker partitions
//!   directly in fetch/process/commit batches, so at most one task per
//!   partition is ever active;
//! - **reactive**: a virtual messaging layer whose consumers (bounded by the
//!   partition count) drain the log and feed an elastic, supervised task pool
//!   through bounded mailboxes, so task parallelism is decoupled from the
//!   partition count. Failed components are detected by heartbeat silence and
//!   regenerated on healthy nodes; stateful tasks rebuild from event-sourced
//!   streams and share cluster state through a versioned CRDT map.
//!
//! The whole system runs on a deterministic discrete-event scheduler with a
//! virtual microsecond clock, so a config plus seed replays byte-identically.
//! The bundled workload is incremental trajectory clustering (micro-cluster
//! feature vectors plus periodic weighted k-means), fed by T-Drive-format
//! files or a seeded synthetic generator. The harness orchestrates node
//! failure injection and collects throughput, cumulative-count, and
//! completion-time metrics for comparing the two architectures.

#![forbid(unsafe_code)]

pub mod broker;
pub mod crdt;
pub mod event_store;
pub mod harness;
pub mod ingest;
pub mod mailbox;
pub mod processing;
pub mod scaling;
pub mod sim;
pub mod supervision;
pub mod tcmm;
pub mod time;
pub mod virtual_messaging;
