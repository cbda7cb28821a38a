use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use memeguard_core::dataset::{Label, MemeInput};
use memeguard_core::pipeline::{Pipeline, PipelineError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Decision, Event, EventStore, Lease, QueueItem, QueueState, Status, StoreError, Verdict};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("item {0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Test clock that only moves when told to.
#[derive(Clone)]
pub struct ManualClock(Arc<Mutex<DateTime<Utc>>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Oldest first; ties by item id.
    #[default]
    Fifo,
    /// Highest prob_hateful first, then oldest.
    Priority,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub lease: Duration,
    pub ordering: Ordering,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            lease: Duration::minutes(10),
            ordering: Ordering::Fifo,
        }
    }
}

/// Client-supplied part of a decision; the server stamps the time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub item_id: String,
    pub moderator_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub item_id: String,
    pub status: Status,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub enqueued: usize,
    pub pending: usize,
    pub in_review: usize,
    pub decided: usize,
    pub awaiting_retry: usize,
    pub decisions: BTreeMap<Verdict, usize>,
    /// Share of confirm decisions agreeing with the model's predicted label;
    /// escalations are excluded. None before any confirm decision.
    pub agreement_rate: Option<f64>,
}

pub struct ModerationService {
    store: Mutex<EventStore>,
    pipeline: Arc<Pipeline>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
}

impl ModerationService {
    pub fn new(store: EventStore, pipeline: Arc<Pipeline>, clock: Arc<dyn Clock>, config: ServiceConfig) -> Self {
        Self {
            store: Mutex::new(store),
            pipeline,
            clock,
            config,
        }
    }

    fn lock(&self) -> MutexGuard<'_, EventStore> {
        self.store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn snapshot_state(&self) -> QueueState {
        self.lock().state().clone()
    }

    pub fn item(&self, item_id: &str) -> Option<QueueItem> {
        self.lock().state().items.get(item_id).cloned()
    }

    pub fn checkpoint(&self) -> Result<(), ServiceError> {
        Ok(self.lock().snapshot()?)
    }

    /// Classifies and persists a meme. Idempotent on meme id. The image must
    /// decode; backend failures leave a pending item with a retry marker.
    pub fn enqueue(&self, meme: MemeInput) -> Result<QueueItem, ServiceError> {
        if let Some(existing) = self.existing(&meme.id) {
            return Ok(existing);
        }
        self.pipeline
            .validate_image(&meme)
            .map_err(|e| ServiceError::Rejected(e.to_string()))?;
        let (interpretation, classification, retry) = match self.pipeline.run(&meme) {
            Ok(out) => (Some(out.interpretation), Some(out.classification), None),
            Err(e) => {
                log::warn!("processing {} failed, will retry: {e}", meme.id);
                (None, None, Some(e.to_string()))
            }
        };
        let mut store = self.lock();
        // Another request may have enqueued the same meme meanwhile.
        if let Some(id) = store.state().by_meme.get(&meme.id) {
            return Ok(store.state().items[id].clone());
        }
        let item_id = store.state().next_item_id();
        store.append(Event::Enqueued {
            item_id: item_id.clone(),
            meme,
            interpretation,
            classification,
            retry,
            at: self.clock.now(),
        })?;
        Ok(store.state().items[&item_id].clone())
    }

    fn existing(&self, meme_id: &str) -> Option<QueueItem> {
        let store = self.lock();
        let state = store.state();
        state.by_meme.get(meme_id).map(|id| state.items[id].clone())
    }

    /// Re-runs the pipeline for items carrying a retry marker. Returns how
    /// many were processed successfully.
    pub fn retry_failed(&self) -> Result<usize, ServiceError> {
        let todo: Vec<QueueItem> = {
            let store = self.lock();
            store
                .state()
                .items
                .values()
                .filter(|i| i.retry.is_some() && i.status == Status::Pending)
                .cloned()
                .collect()
        };
        let mut done = 0;
        for item in todo {
            let event = match self.pipeline.run(&item.meme) {
                Ok(out) => {
                    done += 1;
                    Event::Processed {
                        item_id: item.item_id.clone(),
                        interpretation: out.interpretation,
                        classification: out.classification,
                    }
                }
                Err(e) => Event::RetryFailed {
                    item_id: item.item_id.clone(),
                    reason: e.to_string(),
                },
            };
            self.lock().append(event)?;
        }
        Ok(done)
    }

    fn expire_leases(&self, store: &mut EventStore, now: DateTime<Utc>) -> Result<(), ServiceError> {
        let expired: Vec<String> = store
            .state()
            .items
            .values()
            .filter(|i| i.status == Status::InReview && i.lease.as_ref().is_some_and(|l| l.expires_at <= now))
            .map(|i| i.item_id.clone())
            .collect();
        for item_id in expired {
            store.append(Event::LeaseExpired { item_id, at: now })?;
        }
        Ok(())
    }

    fn pick(&self, state: &QueueState) -> Option<String> {
        let candidates = state
            .items
            .values()
            .filter(|i| i.status == Status::Pending && i.is_ready());
        match self.config.ordering {
            Ordering::Fifo => candidates
                .min_by(|a, b| (a.enqueued_at, &a.item_id).cmp(&(b.enqueued_at, &b.item_id)))
                .map(|i| i.item_id.clone()),
            Ordering::Priority => candidates
                .min_by(|a, b| {
                    let pa = a.classification.as_ref().map_or(0.0, |c| c.prob_hateful);
                    let pb = b.classification.as_ref().map_or(0.0, |c| c.prob_hateful);
                    pb.total_cmp(&pa)
                        .then(a.enqueued_at.cmp(&b.enqueued_at))
                        .then(a.item_id.cmp(&b.item_id))
                })
                .map(|i| i.item_id.clone()),
        }
    }

    /// Leases the next reviewable item to `moderator_id`.
    pub fn next_item(&self, moderator_id: &str) -> Result<Option<QueueItem>, ServiceError> {
        let leased = {
            let mut store = self.lock();
            let now = self.clock.now();
            self.expire_leases(&mut store, now)?;
            let Some(item_id) = self.pick(store.state()) else {
                return Ok(None);
            };
            store.append(Event::Leased {
                item_id: item_id.clone(),
                lease: Lease {
                    moderator_id: moderator_id.to_string(),
                    leased_at: now,
                    expires_at: now + self.config.lease,
                },
            })?;
            store.state().items[&item_id].clone()
        };
        if leased.explanation.is_some() {
            return Ok(Some(leased));
        }
        Ok(Some(self.attach_explanation(leased)))
    }

    /// Computes the explanation outside the lock; a failure leaves the item
    /// without one rather than failing the lease.
    fn attach_explanation(&self, item: QueueItem) -> QueueItem {
        let Some(interpretation) = &item.interpretation else {
            return item;
        };
        let report = match self.pipeline.explain(&item.meme, interpretation) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("explanation for {} failed: {e}", item.item_id);
                return item;
            }
        };
        let mut store = self.lock();
        let event = Event::ExplanationAttached {
            item_id: item.item_id.clone(),
            report,
        };
        match store.append(event) {
            Ok(()) => store.state().items[&item.item_id].clone(),
            Err(e) => {
                log::warn!("could not attach explanation to {}: {e}", item.item_id);
                store.state().items[&item.item_id].clone()
            }
        }
    }

    /// Records a decision for an item leased to the same moderator. Exactly
    /// one decision per item.
    pub fn submit_decision(&self, request: DecisionRequest) -> Result<Ack, ServiceError> {
        let mut store = self.lock();
        let now = self.clock.now();
        let item = store
            .state()
            .items
            .get(&request.item_id)
            .ok_or_else(|| ServiceError::NotFound(request.item_id.clone()))?;
        match (&item.status, &item.lease) {
            (Status::Decided, _) => {
                return Err(ServiceError::Conflict(format!("{} is already decided", item.item_id)))
            }
            (Status::Pending, _) | (Status::InReview, None) => {
                return Err(ServiceError::Conflict(format!("{} is not leased", item.item_id)))
            }
            (Status::InReview, Some(lease)) => {
                if lease.moderator_id != request.moderator_id {
                    return Err(ServiceError::Conflict(format!(
                        "{} is leased to another moderator",
                        item.item_id
                    )));
                }
                if lease.expires_at <= now {
                    return Err(ServiceError::Conflict(format!("lease on {} has expired", item.item_id)));
                }
            }
        }
        let decision = Decision {
            item_id: request.item_id.clone(),
            moderator_id: request.moderator_id,
            verdict: request.verdict,
            notes: request.notes,
            decided_at: now.max(item.enqueued_at),
        };
        let decided_at = decision.decided_at;
        store.append(Event::Decided { decision })?;
        Ok(Ack {
            item_id: request.item_id,
            status: Status::Decided,
            decided_at,
        })
    }

    pub fn stats(&self) -> Stats {
        let store = self.lock();
        let state = store.state();
        let mut decisions = BTreeMap::new();
        let (mut agree, mut confirm) = (0usize, 0usize);
        for item in state.items.values() {
            let Some(d) = &item.decision else { continue };
            *decisions.entry(d.verdict).or_insert(0) += 1;
            let said_hateful = match d.verdict {
                Verdict::ConfirmHateful => true,
                Verdict::ConfirmBenign => false,
                Verdict::Escalate => continue,
            };
            if let Some(c) = &item.classification {
                confirm += 1;
                if (c.predicted_label == Label::Hateful) == said_hateful {
                    agree += 1;
                }
            }
        }
        Stats {
            enqueued: state.items.len(),
            pending: state.count(Status::Pending),
            in_review: state.count(Status::InReview),
            decided: state.count(Status::Decided),
            awaiting_retry: state.items.values().filter(|i| i.retry.is_some()).count(),
            decisions,
            agreement_rate: (confirm > 0).then(|| agree as f64 / confirm as f64),
        }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        ServiceError::Rejected(e.to_string())
    }
}
