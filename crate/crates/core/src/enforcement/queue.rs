//! Durable single-consumer FIFO.
//!
//! Journal format, one entry per line:
//!
//! ```text
//! <seq>\tENQ\t<message json>\t<crc32 hex>
//! <seq>\tACK\t-\t<crc32 hex>
//! ```
//!
//! The checksum is CRC-32 (IEEE) of everything before the last tab. A
//! message is pending from its `ENQ` line until the matching `ACK`. A torn
//! or checksum-failing final line is discarded on open.

use std::collections::{HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::monitor::EnforcementMessage;
use crate::storage::{read_complete_lines, Durability, FailPoint, StoreError};

pub const DEFAULT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry {
    pub seq: u64,
    pub message: EnforcementMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted {
        seq: u64,
    },
    /// The queue is at capacity; the caller must back off and retry.
    RetryLater,
}

fn frame(seq: u64, kind: &str, payload: &str) -> String {
    let body = format!("{seq}\t{kind}\t{payload}");
    let crc = crc32fast::hash(body.as_bytes());
    format!("{body}\t{crc:08x}\n")
}

enum Parsed {
    Enq(u64, Box<EnforcementMessage>),
    Ack(u64),
}

fn parse_line(line: &str) -> Result<Parsed, String> {
    let (body, crc) = line.rsplit_once('\t').ok_or("missing checksum")?;
    let expected = u32::from_str_radix(crc, 16).map_err(|e| e.to_string())?;
    if crc32fast::hash(body.as_bytes()) != expected {
        return Err("checksum mismatch".into());
    }
    let mut parts = body.splitn(3, '\t');
    let seq: u64 = parts
        .next()
        .ok_or("missing seq")?
        .parse()
        .map_err(|e: std::num::ParseIntError| e.to_string())?;
    let kind = parts.next().ok_or("missing kind")?;
    let payload = parts.next().ok_or("missing payload")?;
    match kind {
        "ENQ" => serde_json::from_str(payload)
            .map(|m| Parsed::Enq(seq, Box::new(m)))
            .map_err(|e| e.to_string()),
        "ACK" => Ok(Parsed::Ack(seq)),
        other => Err(format!("unknown entry kind {other:?}")),
    }
}

#[derive(Debug)]
pub struct DurableQueue {
    path: PathBuf,
    file: File,
    durability: Durability,
    capacity: usize,
    next_seq: u64,
    pending: VecDeque<JournalEntry>,
    ever_enqueued: HashSet<String>,
    fail: Arc<FailPoint>,
}

impl DurableQueue {
    pub fn open(
        path: impl Into<PathBuf>,
        capacity: usize,
        durability: Durability,
        fail: Arc<FailPoint>,
    ) -> Result<Self, StoreError> {
        let path = path.into();
        let mut lines = read_complete_lines(&path)?;
        let mut pending: VecDeque<JournalEntry> = VecDeque::new();
        let mut ever_enqueued = HashSet::new();
        let mut next_seq = 1;
        let mut truncate_last = false;
        let count = lines.len();
        for (i, line) in lines.iter().enumerate() {
            match parse_line(line) {
                Ok(Parsed::Enq(seq, message)) => {
                    if seq < next_seq {
                        return Err(StoreError::Corrupt {
                            path: path.clone(),
                            line: i + 1,
                            reason: format!("sequence {seq} out of order"),
                        });
                    }
                    next_seq = seq + 1;
                    ever_enqueued.insert(message.dedup_key());
                    pending.push_back(JournalEntry { seq, message: *message });
                }
                Ok(Parsed::Ack(seq)) => pending.retain(|e| e.seq != seq),
                Err(_) if i + 1 == count => truncate_last = true,
                Err(reason) => {
                    return Err(StoreError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        reason,
                    })
                }
            }
        }
        if truncate_last {
            lines.pop();
            let keep: usize = lines.iter().map(|l| l.len() + 1).sum();
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| StoreError::io(&path, e))?;
            f.set_len(keep as u64).map_err(|e| StoreError::io(&path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(DurableQueue {
            path,
            file,
            durability,
            capacity: capacity.max(1),
            next_seq,
            pending,
            ever_enqueued,
            fail,
        })
    }

    fn write_line(&mut self, line: &str) -> Result<(), StoreError> {
        self.fail.hit()?;
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| StoreError::io(&self.path, e))?;
        match self.durability {
            Durability::Fsync => self.file.sync_data(),
            Durability::Flush => self.file.flush(),
        }
        .map_err(|e| StoreError::io(&self.path, e))
    }

    /// Persists the message before acknowledging it.
    pub fn enqueue(&mut self, message: EnforcementMessage) -> Result<EnqueueOutcome, StoreError> {
        if self.pending.len() >= self.capacity {
            return Ok(EnqueueOutcome::RetryLater);
        }
        let seq = self.next_seq;
        let payload = serde_json::to_string(&message).map_err(|e| StoreError::Encode(e.to_string()))?;
        self.write_line(&frame(seq, "ENQ", &payload))?;
        self.next_seq += 1;
        self.ever_enqueued.insert(message.dedup_key());
        self.pending.push_back(JournalEntry { seq, message });
        Ok(EnqueueOutcome::Accepted { seq })
    }

    pub fn peek(&self) -> Option<&JournalEntry> {
        self.pending.front()
    }

    /// Removes the head once its outcome is durably recorded elsewhere.
    pub fn ack(&mut self, seq: u64) -> Result<(), StoreError> {
        match self.pending.front() {
            Some(head) if head.seq == seq => {}
            _ => {
                return Err(StoreError::Corrupt {
                    path: self.path.clone(),
                    line: 0,
                    reason: format!("ack of {seq} which is not the queue head"),
                })
            }
        }
        self.write_line(&frame(seq, "ACK", "-"))?;
        self.pending.pop_front();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.pending.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Whether a message with this dedup key was ever journaled.
    pub fn has_enqueued(&self, dedup_key: &str) -> bool {
        self.ever_enqueued.contains(dedup_key)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Shared handle: many producers, one consumer that can block for work.
#[derive(Debug, Clone)]
pub struct QueueHandle {
    inner: Arc<(Mutex<DurableQueue>, Condvar)>,
}

impl QueueHandle {
    pub fn new(queue: DurableQueue) -> Self {
        QueueHandle {
            inner: Arc::new((Mutex::new(queue), Condvar::new())),
        }
    }

    pub fn enqueue(&self, message: EnforcementMessage) -> Result<EnqueueOutcome, StoreError> {
        let (lock, cvar) = &*self.inner;
        let outcome = lock.lock().expect("queue lock poisoned").enqueue(message)?;
        if matches!(outcome, EnqueueOutcome::Accepted { .. }) {
            cvar.notify_all();
        }
        Ok(outcome)
    }

    /// Clone of the head, waiting up to `timeout` for one to arrive.
    pub fn wait_head(&self, timeout: Duration) -> Option<JournalEntry> {
        let (lock, cvar) = &*self.inner;
        let guard = lock.lock().expect("queue lock poisoned");
        let (guard, _) = cvar
            .wait_timeout_while(guard, timeout, |q| q.is_empty())
            .expect("queue lock poisoned");
        guard.peek().cloned()
    }

    pub fn head(&self) -> Option<JournalEntry> {
        self.with(|q| q.peek().cloned())
    }

    pub fn ack(&self, seq: u64) -> Result<(), StoreError> {
        self.with(|q| q.ack(seq))
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut DurableQueue) -> R) -> R {
        let (lock, _) = &*self.inner;
        f(&mut lock.lock().expect("queue lock poisoned"))
    }

    /// Wakes a consumer blocked in [`QueueHandle::wait_head`].
    pub fn notify(&self) {
        self.inner.1.notify_all();
    }
}
