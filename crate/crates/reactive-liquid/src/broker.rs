//! In-process emulation of the messaging layer: topic-based partitioned logs with
//! consumer groups, committed offsets, and the one-consumer-per-partition-per-group
//! rule. The broker is a shared service; it is never a target of failure injection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::time::Micros;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BrokerError {
    #[error("topic {0:?} already exists")]
    DuplicateTopic(String),
    #[error("topic must have at least one partition")]
    ZeroPartitions,
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("unknown partition {partition} of topic {topic:?}")]
    UnknownPartition { topic: String, partition: u32 },
    #[error("unknown group {group:?} for topic {topic:?}")]
    UnknownGroup { group: String, topic: String },
    #[error("segment i/o on {path:?}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Immutable record in a partition log. Payload and key are shared so fetches clone cheaply.
#[derive(Debug, Clone)]
pub struct LogMessage {
    pub key: Option<Arc<[u8]>>,
    pub payload: Arc<[u8]>,
    pub offset: u64,
    pub append_time: Micros,
}

#[derive(Debug, Default)]
struct PartitionLog {
    records: Vec<LogMessage>,
}

#[derive(Debug)]
pub struct TopicLog {
    pub name: String,
    partitions: Vec<PartitionLog>,
}

impl TopicLog {
    pub fn partition_count(&self) -> u32 {
        self.partitions.len() as u32
    }

    pub fn end_offset(&self, partition: u32) -> u64 {
        self.partitions[partition as usize].records.len() as u64
    }
}

/// Snapshot of a consumer group's partition ownership at one generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub group: String,
    pub topic: String,
    /// partition index -> consumer id; absent partitions are unassigned.
    pub mapping: BTreeMap<u32, String>,
    pub generation: u64,
}

impl GroupAssignment {
    pub fn partitions_of(&self, consumer: &str) -> Vec<u32> {
        self.mapping
            .iter()
            .filter(|(_, c)| c.as_str() == consumer)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn assigned_consumers(&self) -> BTreeSet<&str> {
        self.mapping.values().map(|s| s.as_str()).collect()
    }
}

#[derive(Debug)]
struct GroupState {
    members: BTreeSet<String>,
    assignment: GroupAssignment,
}

/// FNV-1a 64-bit hash; fixed partitioner for keyed publishes.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in data {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Default)]
pub struct Broker {
    topics: BTreeMap<String, TopicLog>,
    groups: BTreeMap<(String, String), GroupState>,
    commits: BTreeMap<(String, String, u32), u64>,
    rr_cursors: BTreeMap<(String, String), u32>,
    publish_counts: BTreeMap<String, u64>,
    persist_dir: Option<PathBuf>,
    segment_files: BTreeMap<(String, u32), File>,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables write-through append-only segment files, one per partition.
    pub fn with_persistence(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            persist_dir: Some(dir.to_path_buf()),
            ..Self::default()
        })
    }

    pub fn create_topic(&mut self, name: &str, partitions: u32) -> Result<(), BrokerError> {
        if partitions == 0 {
            return Err(BrokerError::ZeroPartitions);
        }
        if self.topics.contains_key(name) {
            return Err(BrokerError::DuplicateTopic(name.to_string()));
        }
        let mut logs = Vec::with_capacity(partitions as usize);
        logs.resize_with(partitions as usize, PartitionLog::default);
        self.topics.insert(
            name.to_string(),
            TopicLog {
                name: name.to_string(),
                partitions: logs,
            },
        );
        Ok(())
    }

    pub fn topic(&self, name: &str) -> Result<&TopicLog, BrokerError> {
        self.topics
            .get(name)
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    pub fn partition_count(&self, topic: &str) -> Result<u32, BrokerError> {
        Ok(self.topic(topic)?.partition_count())
    }

    /// Appends one message. Keyed messages hash to `fnv1a64(key) % partitions`;
    /// keyless messages round-robin per producer. An empty key counts as no key.
    pub fn publish(
        &mut self,
        producer: &str,
        topic: &str,
        key: Option<&[u8]>,
        payload: &[u8],
        now: Micros,
    ) -> Result<(u32, u64), BrokerError> {
        let n_parts = self.partition_count(topic)?;
        let key = key.filter(|k| !k.is_empty());
        let partition = match key {
            Some(k) => (fnv1a64(k) % u64::from(n_parts)) as u32,
            None => {
                let cursor = self
                    .rr_cursors
                    .entry((producer.to_string(), topic.to_string()))
                    .or_insert(0);
                let p = *cursor % n_parts;
                *cursor = (*cursor + 1) % n_parts;
                p
            }
        };
        let message = LogMessage {
            key: key.map(Arc::from),
            payload: Arc::from(payload),
            offset: 0,
            append_time: now,
        };
        *self.publish_counts.entry(producer.to_string()).or_insert(0) += 1;
        self.append(topic, partition, message)
    }

    /// Messages this producer id has published (across all topics).
    pub fn publish_count(&self, producer: &str) -> u64 {
        self.publish_counts.get(producer).copied().unwrap_or(0)
    }

    fn append(
        &mut self,
        topic: &str,
        partition: u32,
        mut message: LogMessage,
    ) -> Result<(u32, u64), BrokerError> {
        let log = self
            .topics
            .get_mut(topic)
            .ok_or_else(|| BrokerError::UnknownTopic(topic.to_string()))?
            .partitions
            .get_mut(partition as usize)
            .ok_or_else(|| BrokerError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            })?;
        message.offset = log.records.len() as u64;
        let offset = message.offset;
        if self.persist_dir.is_some() {
            self.persist_record(topic, partition, &message)?;
        }
        let log = &mut self.topics.get_mut(topic).unwrap().partitions[partition as usize];
        log.records.push(message);
        Ok((partition, offset))
    }

    fn persist_record(
        &mut self,
        topic: &str,
        partition: u32,
        message: &LogMessage,
    ) -> Result<(), BrokerError> {
        let dir = self.persist_dir.clone().unwrap();
        let path = dir.join(format!("{topic}-{partition}.seg"));
        let file = match self.segment_files.entry((topic.to_string(), partition)) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| BrokerError::Io {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                v.insert(f)
            }
        };
        let mut buf = Vec::with_capacity(message.payload.len() + 32);
        segment::encode_record(
            &mut buf,
            message.key.as_deref(),
            &message.payload,
            message.append_time,
        );
        file.write_all(&buf).map_err(|e| BrokerError::Io {
            path,
            message: e.to_string(),
        })
    }

    pub fn fetch(
        &self,
        topic: &str,
        partition: u32,
        from_offset: u64,
        max_n: usize,
    ) -> Result<Vec<LogMessage>, BrokerError> {
        let log = self
            .topic(topic)?
            .partitions
            .get(partition as usize)
            .ok_or_else(|| BrokerError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            })?;
        let start = from_offset.min(log.records.len() as u64) as usize;
        let end = (start + max_n).min(log.records.len());
        Ok(log.records[start..end].to_vec())
    }

    pub fn end_offset(&self, topic: &str, partition: u32) -> Result<u64, BrokerError> {
        let t = self.topic(topic)?;
        if partition >= t.partition_count() {
            return Err(BrokerError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            });
        }
        Ok(t.end_offset(partition))
    }

    pub fn join_group(
        &mut self,
        group: &str,
        topic: &str,
        consumer_id: &str,
    ) -> Result<GroupAssignment, BrokerError> {
        let _ = self.topic(topic)?;
        let key = (group.to_string(), topic.to_string());
        let state = self.groups.entry(key).or_insert_with(|| GroupState {
            members: BTreeSet::new(),
            assignment: GroupAssignment {
                group: group.to_string(),
                topic: topic.to_string(),
                mapping: BTreeMap::new(),
                generation: 0,
            },
        });
        state.members.insert(consumer_id.to_string());
        Ok(Self::rebalance(state, self.topics[topic].partition_count()))
    }

    /// Idempotent: removing a non-member returns the current assignment unchanged.
    pub fn leave_group(
        &mut self,
        group: &str,
        topic: &str,
        consumer_id: &str,
    ) -> Result<GroupAssignment, BrokerError> {
        let _ = self.topic(topic)?;
        let key = (group.to_string(), topic.to_string());
        let state = match self.groups.get_mut(&key) {
            Some(s) => s,
            None => {
                return Err(BrokerError::UnknownGroup {
                    group: group.to_string(),
                    topic: topic.to_string(),
                })
            }
        };
        if !state.members.remove(consumer_id) {
            return Ok(state.assignment.clone());
        }
        Ok(Self::rebalance(state, self.topics[topic].partition_count()))
    }

    /// Round-robin over lexicographically sorted member ids: partition i goes to
    /// member i % len, so at most min(members, partitions) consumers hold partitions.
    fn rebalance(state: &mut GroupState, partitions: u32) -> GroupAssignment {
        let members: Vec<&String> = state.members.iter().collect();
        let mut mapping = BTreeMap::new();
        if !members.is_empty() {
            for p in 0..partitions {
                mapping.insert(p, members[p as usize % members.len()].clone());
            }
        }
        state.assignment.mapping = mapping;
        state.assignment.generation += 1;
        state.assignment.clone()
    }

    pub fn assignment(&self, group: &str, topic: &str) -> Option<&GroupAssignment> {
        self.groups
            .get(&(group.to_string(), topic.to_string()))
            .map(|s| &s.assignment)
    }

    /// Committed value never regresses: stores max(previous, offset).
    pub fn commit_offset(
        &mut self,
        group: &str,
        topic: &str,
        partition: u32,
        offset: u64,
    ) -> Result<(), BrokerError> {
        let t = self.topic(topic)?;
        if partition >= t.partition_count() {
            return Err(BrokerError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            });
        }
        let slot = self
            .commits
            .entry((group.to_string(), topic.to_string(), partition))
            .or_insert(0);
        *slot = (*slot).max(offset);
        Ok(())
    }

    /// Next-to-consume offset; 0 when nothing was ever committed.
    pub fn fetch_committed(
        &self,
        group: &str,
        topic: &str,
        partition: u32,
    ) -> Result<u64, BrokerError> {
        let t = self.topic(topic)?;
        if partition >= t.partition_count() {
            return Err(BrokerError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            });
        }
        Ok(self
            .commits
            .get(&(group.to_string(), topic.to_string(), partition))
            .copied()
            .unwrap_or(0))
    }
}

/// On-disk partition segment codec. Records are
/// `[u32 key_len][key][u32 payload_len][payload][u64 append_time_micros]`,
/// little-endian, offsets implicit by record position. A zero key length
/// decodes as "no key"; publishes normalize empty keys to none to match.
pub mod segment {
    use super::*;

    /// (key, payload, append_time) as stored in one record.
    pub type SegmentRecord = (Option<Vec<u8>>, Vec<u8>, Micros);

    pub fn encode_record(out: &mut Vec<u8>, key: Option<&[u8]>, payload: &[u8], time: Micros) {
        let key = key.unwrap_or(&[]);
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(&time.to_le_bytes());
    }

    /// Decodes records from a segment image. Stops at the first torn record and
    /// reports how many bytes formed whole records, so callers can truncate.
    pub fn decode_all(bytes: &[u8]) -> (Vec<SegmentRecord>, usize) {
        let mut records = Vec::new();
        let mut cursor = 0usize;
        loop {
            match decode_one(bytes, cursor) {
                Some((record, next)) => {
                    records.push(record);
                    cursor = next;
                }
                None => return (records, cursor),
            }
        }
    }

    fn decode_one(bytes: &[u8], at: usize) -> Option<(SegmentRecord, usize)> {
        let mut cursor = at;
        let key_len = read_u32(bytes, &mut cursor)? as usize;
        let key = read_bytes(bytes, &mut cursor, key_len)?;
        let payload_len = read_u32(bytes, &mut cursor)? as usize;
        let payload = read_bytes(bytes, &mut cursor, payload_len)?;
        let time = read_u64(bytes, &mut cursor)?;
        let key = if key.is_empty() { None } else { Some(key) };
        Some(((key, payload, time), cursor))
    }

    fn read_u32(bytes: &[u8], cursor: &mut usize) -> Option<u32> {
        let end = cursor.checked_add(4)?;
        let v = u32::from_le_bytes(bytes.get(*cursor..end)?.try_into().ok()?);
        *cursor = end;
        Some(v)
    }

    fn read_u64(bytes: &[u8], cursor: &mut usize) -> Option<u64> {
        let end = cursor.checked_add(8)?;
        let v = u64::from_le_bytes(bytes.get(*cursor..end)?.try_into().ok()?);
        *cursor = end;
        Some(v)
    }

    fn read_bytes(bytes: &[u8], cursor: &mut usize, len: usize) -> Option<Vec<u8>> {
        let end = cursor.checked_add(len)?;
        let v = bytes.get(*cursor..end)?.to_vec();
        *cursor = end;
        Some(v)
    }
}
