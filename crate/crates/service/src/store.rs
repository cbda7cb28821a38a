//! Queue state as a fold over an append-only event log.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use memeguard_core::dataset::MemeInput;
use memeguard_core::explainer::ExplanationReport;
use memeguard_core::fusion::ClassificationResult;
use memeguard_core::interpret::Interpretation;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt event log {path} at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("event rejected: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    InReview,
    Decided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ConfirmHateful,
    ConfirmBenign,
    Escalate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub moderator_id: String,
    pub leased_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub item_id: String,
    pub moderator_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: String,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub item_id: String,
    pub meme: MemeInput,
    pub interpretation: Option<Interpretation>,
    pub classification: Option<ClassificationResult>,
    pub explanation: Option<ExplanationReport>,
    pub status: Status,
    pub enqueued_at: DateTime<Utc>,
    pub lease: Option<Lease>,
    /// Set when interpretation or classification failed and must be retried.
    pub retry: Option<String>,
    pub decision: Option<Decision>,
}

impl QueueItem {
    pub fn is_ready(&self) -> bool {
        self.classification.is_some() && self.retry.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Enqueued {
        item_id: String,
        meme: MemeInput,
        interpretation: Option<Interpretation>,
        classification: Option<ClassificationResult>,
        retry: Option<String>,
        at: DateTime<Utc>,
    },
    Processed {
        item_id: String,
        interpretation: Interpretation,
        classification: ClassificationResult,
    },
    RetryFailed {
        item_id: String,
        reason: String,
    },
    Leased {
        item_id: String,
        lease: Lease,
    },
    LeaseExpired {
        item_id: String,
        at: DateTime<Utc>,
    },
    ExplanationAttached {
        item_id: String,
        report: ExplanationReport,
    },
    Decided {
        decision: Decision,
    },
}

/// Everything the queue knows; rebuilt by replaying events in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub items: BTreeMap<String, QueueItem>,
    pub by_meme: HashMap<String, String>,
    pub next_seq: u64,
}

impl QueueState {
    pub fn next_item_id(&self) -> String {
        format!("it-{:08}", self.next_seq)
    }

    fn item_mut(&mut self, item_id: &str) -> Result<&mut QueueItem, StoreError> {
        self.items
            .get_mut(item_id)
            .ok_or_else(|| StoreError::Invalid(format!("unknown item {item_id}")))
    }

    /// Applies one event. Transitions that would break the status order
    /// (pending, then in review, then decided) are rejected.
    pub fn apply(&mut self, event: &Event) -> Result<(), StoreError> {
        match event {
            Event::Enqueued {
                item_id,
                meme,
                interpretation,
                classification,
                retry,
                at,
            } => {
                if self.items.contains_key(item_id) || self.by_meme.contains_key(&meme.id) {
                    return Err(StoreError::Invalid(format!("duplicate item {item_id}")));
                }
                self.by_meme.insert(meme.id.clone(), item_id.clone());
                self.items.insert(
                    item_id.clone(),
                    QueueItem {
                        item_id: item_id.clone(),
                        meme: meme.clone(),
                        interpretation: interpretation.clone(),
                        classification: classification.clone(),
                        explanation: None,
                        status: Status::Pending,
                        enqueued_at: *at,
                        lease: None,
                        retry: retry.clone(),
                        decision: None,
                    },
                );
                self.next_seq += 1;
            }
            Event::Processed {
                item_id,
                interpretation,
                classification,
            } => {
                let item = self.item_mut(item_id)?;
                if item.status != Status::Pending {
                    return Err(StoreError::Invalid(format!("{item_id} is not pending")));
                }
                item.interpretation = Some(interpretation.clone());
                item.classification = Some(classification.clone());
                item.retry = None;
            }
            Event::RetryFailed { item_id, reason } => {
                self.item_mut(item_id)?.retry = Some(reason.clone());
            }
            Event::Leased { item_id, lease } => {
                let item = self.item_mut(item_id)?;
                if item.status != Status::Pending {
                    return Err(StoreError::Invalid(format!("{item_id} is not pending")));
                }
                item.status = Status::InReview;
                item.lease = Some(lease.clone());
            }
            Event::LeaseExpired { item_id, .. } => {
                let item = self.item_mut(item_id)?;
                if item.status != Status::InReview {
                    return Err(StoreError::Invalid(format!("{item_id} is not in review")));
                }
                item.status = Status::Pending;
                item.lease = None;
            }
            Event::ExplanationAttached { item_id, report } => {
                let item = self.item_mut(item_id)?;
                if item.status == Status::Decided {
                    return Err(StoreError::Invalid(format!("{item_id} is decided")));
                }
                item.explanation = Some(report.clone());
            }
            Event::Decided { decision } => {
                let item = self.item_mut(&decision.item_id)?;
                if item.status != Status::InReview || item.decision.is_some() {
                    return Err(StoreError::Invalid(format!("{} is not in review", decision.item_id)));
                }
                item.status = Status::Decided;
                item.lease = None;
                item.decision = Some(decision.clone());
            }
        }
        Ok(())
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self, StoreError> {
        let mut state = Self::default();
        for e in events {
            state.apply(e)?;
        }
        Ok(state)
    }

    pub fn count(&self, status: Status) -> usize {
        self.items.values().filter(|i| i.status == status).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    /// fsync after every event.
    Sync,
    /// Flush to the OS only; survives process crashes, not power loss.
    Flush,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    events_applied: u64,
    state: QueueState,
}

/// The event log plus the state it implies. Single writer.
pub struct EventStore {
    dir: PathBuf,
    log: File,
    state: QueueState,
    events_applied: u64,
    snapshot_every: u64,
    durability: Durability,
}

const LOG_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads the log, tolerating a torn final line from a crash mid-append.
pub fn read_log(path: &Path) -> Result<Vec<Event>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut events = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        number += 1;
        // Every append ends with a newline, so an unterminated line is torn.
        if !line.ends_with('\n') {
            log::warn!("ignoring torn final event at {}:{number}", path.display());
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(text) {
            Ok(e) => events.push(e),
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: number,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(events)
}

impl EventStore {
    pub fn open(dir: &Path, durability: Durability) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log_path = dir.join(LOG_FILE);
        let events = read_log(&log_path)?;

        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let snapshot = match fs::read(&snapshot_path) {
            Ok(bytes) => match serde_json::from_slice::<Snapshot>(&bytes) {
                Ok(s) if s.events_applied as usize <= events.len() => Some(s),
                Ok(_) => {
                    log::warn!("snapshot is ahead of the log; replaying from scratch");
                    None
                }
                Err(e) => {
                    log::warn!("unreadable snapshot ({e}); replaying from scratch");
                    None
                }
            },
            Err(_) => None,
        };
        let (mut state, skip) = match snapshot {
            Some(s) => (s.state, s.events_applied as usize),
            None => (QueueState::default(), 0),
        };
        for e in &events[skip..] {
            state.apply(e)?;
        }

        // Drop any torn tail so the next append starts on a fresh line.
        let on_disk = fs::read(&log_path).unwrap_or_default();
        if on_disk.last().is_some_and(|b| *b != b'\n') {
            let keep = on_disk.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            let f = OpenOptions::new().write(true).open(&log_path).map_err(io_err(&log_path))?;
            f.set_len(keep as u64).map_err(io_err(&log_path))?;
        }

        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            state,
            events_applied: events.len() as u64,
            snapshot_every: 500,
            durability,
        })
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn state(&self) -> &QueueState {
        &self.state
    }

    pub fn events_applied(&self) -> u64 {
        self.events_applied
    }

    /// Validates, persists, then applies. The event is on disk before the
    /// in-memory state changes.
    pub fn append(&mut self, event: Event) -> Result<(), StoreError> {
        let mut probe = self.state.clone_for_check(&event);
        probe.apply(&event)?;
        let path = self.dir.join(LOG_FILE);
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        match self.durability {
            Durability::Sync => self.log.sync_data().map_err(io_err(&path))?,
            Durability::Flush => self.log.flush().map_err(io_err(&path))?,
        }
        self.state.apply(&event)?;
        self.events_applied += 1;
        if self.events_applied.is_multiple_of(self.snapshot_every) {
            if let Err(e) = self.snapshot() {
                log::warn!("snapshot failed: {e}");
            }
        }
        Ok(())
    }

    /// Writes the current state atomically next to the log.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let body = serde_json::to_vec(&Snapshot {
            events_applied: self.events_applied,
            state: self.state.clone(),
        })
        .expect("snapshot serializes");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }
}

impl QueueState {
    /// A copy of just enough state to dry-run `event`.
    fn clone_for_check(&self, event: &Event) -> QueueState {
        let id = match event {
            Event::Enqueued { item_id, meme, .. } => {
                let mut s = QueueState {
                    items: BTreeMap::new(),
                    by_meme: HashMap::new(),
                    next_seq: self.next_seq,
                };
                if let Some(existing) = self.items.get(item_id) {
                    s.items.insert(item_id.clone(), existing.clone());
                }
                if let Some(v) = self.by_meme.get(&meme.id) {
                    s.by_meme.insert(meme.id.clone(), v.clone());
                }
                return s;
            }
            Event::Processed { item_id, .. }
            | Event::RetryFailed { item_id, .. }
            | Event::Leased { item_id, .. }
            | Event::LeaseExpired { item_id, .. }
            | Event::ExplanationAttached { item_id, .. } => item_id,
            Event::Decided { decision } => &decision.item_id,
        };
        let mut s = QueueState::default();
        if let Some(item) = self.items.get(id) {
            s.items.insert(id.clone(), item.clone());
        }
        s
    }
}
