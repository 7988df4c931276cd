//! Event sourcing: append-only streams of opaque state-change events with dense
//! sequence numbers. State is rebuilt by replaying a stream in order. Streams can
//! be file-backed with the same length-framed record format as broker segments;
//! recovery truncates a torn final record instead of failing.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::broker::segment;

#[derive(Debug, Error)]
pub enum EventStoreError {
    #[error("event store i/o on {path:?}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Default)]
pub struct EventStream {
    events: Vec<Arc<[u8]>>,
}

impl EventStream {
    pub fn len(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.events.iter().map(|e| e.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct EventStore {
    streams: BTreeMap<String, EventStream>,
    persist_dir: Option<PathBuf>,
    files: BTreeMap<String, File>,
}

impl EventStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a file-backed store, recovering any streams already on disk.
    /// A torn tail (partial final record) is dropped and the file truncated.
    pub fn with_persistence(dir: &Path) -> Result<Self, EventStoreError> {
        std::fs::create_dir_all(dir).map_err(|e| EventStoreError::Io {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut store = Self {
            persist_dir: Some(dir.to_path_buf()),
            ..Self::default()
        };
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| EventStoreError::Io {
                path: dir.to_path_buf(),
                message: e.to_string(),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "evt"))
            .collect();
        entries.sort();
        for path in entries {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let stream_id = stem.replace("__", ":");
            let bytes = std::fs::read(&path).map_err(|e| EventStoreError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let (records, consumed) = segment::decode_all(&bytes);
            if consumed < bytes.len() {
                let f = OpenOptions::new().write(true).open(&path).map_err(|e| {
                    EventStoreError::Io {
                        path: path.clone(),
                        message: e.to_string(),
                    }
                })?;
                f.set_len(consumed as u64)
                    .map_err(|e| EventStoreError::Io {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
            }
            let stream = store.streams.entry(stream_id).or_default();
            for (_, payload, _) in records {
                stream.events.push(Arc::from(payload.as_slice()));
            }
        }
        Ok(store)
    }

    fn file_path(dir: &Path, stream_id: &str) -> PathBuf {
        dir.join(format!("{}.evt", stream_id.replace(':', "__")))
    }

    /// Appends one event, creating the stream on first use, and returns the
    /// dense sequence number assigned to it.
    pub fn append(&mut self, stream_id: &str, event: &[u8]) -> Result<u64, EventStoreError> {
        if let Some(dir) = self.persist_dir.clone() {
            let path = Self::file_path(&dir, stream_id);
            let file = match self.files.entry(stream_id.to_string()) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(v) => {
                    let f = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| EventStoreError::Io {
                            path: path.clone(),
                            message: e.to_string(),
                        })?;
                    v.insert(f)
                }
            };
            let stream_len = self.streams.get(stream_id).map(|s| s.len()).unwrap_or(0);
            let mut buf = Vec::with_capacity(event.len() + 16);
            segment::encode_record(&mut buf, None, event, stream_len);
            file.write_all(&buf).map_err(|e| EventStoreError::Io {
                path,
                message: e.to_string(),
            })?;
        }
        let stream = self.streams.entry(stream_id.to_string()).or_default();
        stream.events.push(Arc::from(event));
        Ok(stream.len() - 1)
    }

    /// Folds the stream's events in sequence order. Replaying an absent stream
    /// yields `init` unchanged.
    pub fn replay<S>(&self, stream_id: &str, init: S, fold: impl FnMut(S, &[u8]) -> S) -> S {
        match self.streams.get(stream_id) {
            None => init,
            Some(stream) => stream.iter().fold(init, fold),
        }
    }

    pub fn stream_len(&self, stream_id: &str) -> u64 {
        self.streams.get(stream_id).map(|s| s.len()).unwrap_or(0)
    }

    pub fn stream(&self, stream_id: &str) -> Option<&EventStream> {
        self.streams.get(stream_id)
    }
}
