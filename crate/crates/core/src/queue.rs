//! Referral queue shared by the human oracle and the labelling service.
//!
//! All mutations go through one mutex, so the queue has a single writer at a
//! time. The active-learning loop opens a batch and parks on a channel that
//! fires once every item in the batch has a label.

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleId;
use crate::uncertainty::PosteriorHistogram;

pub const DEFAULT_HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Labelled,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample_id: SampleId,
    /// Feature vector shown to the annotator.
    pub payload: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub scalar_uncertainty: f64,
    pub histogram: Option<PosteriorHistogram>,
    pub enqueue_iteration: usize,
    pub status: ItemStatus,
    pub label: Option<usize>,
    pub annotator_id: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub submitted_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub sample_id: SampleId,
    pub label: usize,
    #[serde(default)]
    pub annotator_id: String,
    /// Filled in by the service when absent.
    #[serde(default)]
    pub submitted_at: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopPhase {
    #[default]
    Idle,
    Training,
    AwaitingLabels,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopStatus {
    pub phase: LoopPhase,
    pub iteration: usize,
    pub labelled_fraction: f64,
    pub validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub pending: usize,
    pub stop_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("sample {0} is not in the queue")]
    NotFound(SampleId),
    #[error("sample {0} is not pending")]
    NotPending(SampleId),
    #[error("label {label} outside 0..{num_classes}")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("a labelling batch is already open")]
    BatchInProgress,
    #[error("a batch must contain at least one item")]
    EmptyBatch,
}

struct OpenBatch {
    ids: Vec<SampleId>,
    done: mpsc::Sender<Vec<usize>>,
}

struct Inner {
    num_classes: usize,
    items: HashMap<SampleId, QueueItem>,
    batch: Option<OpenBatch>,
    status: LoopStatus,
}

impl Inner {
    fn pending_count(&self) -> usize {
        self.items
            .values()
            .filter(|i| i.status == ItemStatus::Pending)
            .count()
    }

    fn insert(&mut self, mut item: QueueItem) {
        item.status = ItemStatus::Pending;
        item.label = None;
        item.annotator_id = None;
        item.submitted_at = None;
        self.items.insert(item.sample_id, item);
    }

    /// Sends the batch labels if every item is labelled.
    fn try_complete(&mut self) {
        let complete = self.batch.as_ref().is_some_and(|b| {
            b.ids
                .iter()
                .all(|id| self.items[id].status == ItemStatus::Labelled)
        });
        if complete {
            let batch = self.batch.take().expect("checked above");
            let labels = batch
                .ids
                .iter()
                .map(|id| self.items[id].label.expect("labelled item"))
                .collect();
            // The receiver may have timed out already; nothing to do then.
            let _ = batch.done.send(labels);
        }
    }
}

pub struct ReferralQueue {
    inner: Mutex<Inner>,
}

impl ReferralQueue {
    pub fn new(num_classes: usize) -> Self {
        Self {
            inner: Mutex::new(Inner {
                num_classes,
                items: HashMap::new(),
                batch: None,
                status: LoopStatus::default(),
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn num_classes(&self) -> usize {
        self.lock().num_classes
    }

    /// Adds items outside any batch. An id already present is replaced and
    /// becomes pending again.
    pub fn enqueue(&self, items: Vec<QueueItem>) {
        let mut inner = self.lock();
        for item in items {
            inner.insert(item);
        }
        inner.status.pending = inner.pending_count();
    }

    /// Enqueues a batch and returns the channel on which its labels arrive,
    /// in the order of `items`.
    pub fn open_batch(
        &self,
        items: Vec<QueueItem>,
    ) -> Result<mpsc::Receiver<Vec<usize>>, QueueError> {
        if items.is_empty() {
            return Err(QueueError::EmptyBatch);
        }
        let mut inner = self.lock();
        if inner.batch.is_some() {
            return Err(QueueError::BatchInProgress);
        }
        let (tx, rx) = mpsc::channel();
        let ids = items.iter().map(|i| i.sample_id).collect();
        for item in items {
            inner.insert(item);
        }
        inner.batch = Some(OpenBatch { ids, done: tx });
        inner.status.phase = LoopPhase::AwaitingLabels;
        inner.status.pending = inner.pending_count();
        Ok(rx)
    }

    /// Cancels the open batch; its unlabelled items become expired. Returns
    /// the number of items expired.
    pub fn expire_batch(&self) -> usize {
        let mut inner = self.lock();
        let Some(batch) = inner.batch.take() else {
            return 0;
        };
        let mut expired = 0;
        for id in &batch.ids {
            let item = inner.items.get_mut(id).expect("batch items are queued");
            if item.status == ItemStatus::Pending {
                item.status = ItemStatus::Expired;
                expired += 1;
            }
        }
        inner.status.pending = inner.pending_count();
        expired
    }

    pub fn has_open_batch(&self) -> bool {
        self.lock().batch.is_some()
    }

    /// Pending items by uncertainty, highest first; ties go to the smaller id.
    pub fn pending(&self, limit: Option<usize>) -> Vec<QueueItem> {
        let inner = self.lock();
        let mut items: Vec<QueueItem> = inner
            .items
            .values()
            .filter(|i| i.status == ItemStatus::Pending)
            .cloned()
            .collect();
        items.sort_by(|a, b| {
            b.scalar_uncertainty
                .total_cmp(&a.scalar_uncertainty)
                .then(a.sample_id.cmp(&b.sample_id))
        });
        if let Some(k) = limit {
            items.truncate(k);
        }
        items
    }

    pub fn get(&self, id: SampleId) -> Option<QueueItem> {
        self.lock().items.get(&id).cloned()
    }

    /// Records a label. The first valid submission for a pending item wins.
    pub fn submit(&self, sub: LabelSubmission) -> Result<QueueItem, QueueError> {
        let mut inner = self.lock();
        let num_classes = inner.num_classes;
        let item = inner
            .items
            .get_mut(&sub.sample_id)
            .ok_or(QueueError::NotFound(sub.sample_id))?;
        if item.status != ItemStatus::Pending {
            return Err(QueueError::NotPending(sub.sample_id));
        }
        if sub.label >= num_classes {
            return Err(QueueError::InvalidLabel {
                label: sub.label,
                num_classes,
            });
        }
        item.status = ItemStatus::Labelled;
        item.label = Some(sub.label);
        item.annotator_id = Some(sub.annotator_id);
        item.submitted_at = sub.submitted_at;
        let out = item.clone();
        inner.try_complete();
        inner.status.pending = inner.pending_count();
        Ok(out)
    }

    pub fn status(&self) -> LoopStatus {
        self.lock().status.clone()
    }

    pub fn update_status(&self, f: impl FnOnce(&mut LoopStatus)) {
        let mut inner = self.lock();
        f(&mut inner.status);
        inner.status.pending = inner.pending_count();
    }
}
