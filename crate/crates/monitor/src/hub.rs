//! Pub/sub fan-out of pose snapshots and warnings.
//!
//! Each subscriber owns an independent queue. Pose updates are conflated:
//! a pose still waiting in the queue is replaced by a newer one, so a slow
//! consumer only ever sees the latest state. Warnings are never dropped;
//! they wait in the same queue (preserving relative order) up to a bounded
//! limit, and a subscriber that overflows it is disconnected.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use shm_core::frame::{FrameSnapshot, WarningEvent};
use tokio::sync::Notify;

use crate::wire::{PoseUpdate, ServerMessage, WarningMessage};

pub const DEFAULT_WARNING_QUEUE: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HubError {
    #[error("structure {0:?} not found")]
    NotFound(String),
}

/// An event delivered to one subscriber.
#[derive(Clone, Debug)]
pub enum Outbound {
    Pose(Arc<FrameSnapshot>),
    Warning(Arc<WarningEvent>),
}

/// An event with its per-subscription sequence number.
#[derive(Clone, Debug)]
pub struct OutboundFrame {
    pub seq: u64,
    pub event: Outbound,
}

impl OutboundFrame {
    pub fn event_name(&self) -> &'static str {
        match self.event {
            Outbound::Pose(_) => "pose_update",
            Outbound::Warning(_) => "warning",
        }
    }

    pub fn to_message(&self) -> ServerMessage {
        match &self.event {
            Outbound::Pose(s) => ServerMessage::PoseUpdate(PoseUpdate::from_snapshot(s, self.seq)),
            Outbound::Warning(w) => ServerMessage::Warning(WarningMessage::from_event(w, self.seq)),
        }
    }
}

#[derive(Debug, Default)]
struct Queue {
    items: VecDeque<Outbound>,
    warnings: usize,
    next_seq: u64,
    last_pose_t_ms: Option<i64>,
    closed: bool,
}

#[derive(Debug)]
struct Slot {
    id: u64,
    structure_id: String,
    queue: Mutex<Queue>,
    notify: Notify,
}

enum Offer {
    Delivered,
    Skipped,
    Closed,
}

impl Slot {
    fn offer_pose(&self, snapshot: &Arc<FrameSnapshot>) -> Offer {
        let mut q = self.queue.lock();
        if q.closed {
            return Offer::Closed;
        }
        if q.last_pose_t_ms.is_some_and(|t| snapshot.frame_t_ms <= t) {
            return Offer::Skipped;
        }
        if let Some(i) = q.items.iter().position(|o| matches!(o, Outbound::Pose(_))) {
            q.items.remove(i);
        }
        q.items.push_back(Outbound::Pose(snapshot.clone()));
        q.last_pose_t_ms = Some(snapshot.frame_t_ms);
        drop(q);
        self.notify.notify_one();
        Offer::Delivered
    }

    fn offer_warning(&self, event: &Arc<WarningEvent>, limit: usize) -> Offer {
        let mut q = self.queue.lock();
        if q.closed {
            return Offer::Closed;
        }
        if q.warnings >= limit {
            q.closed = true;
            q.items.clear();
            drop(q);
            self.notify.notify_one();
            return Offer::Closed;
        }
        q.items.push_back(Outbound::Warning(event.clone()));
        q.warnings += 1;
        drop(q);
        self.notify.notify_one();
        Offer::Delivered
    }

    fn close(&self) {
        self.queue.lock().closed = true;
        self.notify.notify_one();
    }
}

#[derive(Default)]
struct State {
    subscribers: HashMap<String, Vec<Arc<Slot>>>,
    latest: HashMap<String, Arc<FrameSnapshot>>,
}

type StructureExists = dyn Fn(&str) -> bool + Send + Sync;

pub struct Hub {
    state: RwLock<State>,
    next_id: AtomicU64,
    warning_limit: usize,
    exists: Box<StructureExists>,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub").field("warning_limit", &self.warning_limit).finish_non_exhaustive()
    }
}

impl Hub {
    /// `exists` decides whether a structure id may be subscribed to.
    pub fn new(exists: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        Self::with_warning_limit(exists, DEFAULT_WARNING_QUEUE)
    }

    pub fn with_warning_limit(exists: impl Fn(&str) -> bool + Send + Sync + 'static, warning_limit: usize) -> Self {
        Hub {
            state: RwLock::new(State::default()),
            next_id: AtomicU64::new(1),
            warning_limit,
            exists: Box::new(exists),
        }
    }

    /// Registers a subscriber. The most recent snapshot of the structure, if
    /// any, is queued before anything else.
    pub fn subscribe(self: &Arc<Self>, structure_id: &str) -> Result<Subscription, HubError> {
        if !(self.exists)(structure_id) {
            return Err(HubError::NotFound(structure_id.to_owned()));
        }
        let slot = Arc::new(Slot {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            structure_id: structure_id.to_owned(),
            queue: Mutex::new(Queue::default()),
            notify: Notify::new(),
        });
        let mut state = self.state.write();
        if let Some(latest) = state.latest.get(structure_id) {
            slot.offer_pose(latest);
        }
        state.subscribers.entry(structure_id.to_owned()).or_default().push(slot.clone());
        Ok(Subscription { slot, hub: Arc::downgrade(self) })
    }

    pub fn subscriber_count(&self, structure_id: &str) -> usize {
        self.state.read().subscribers.get(structure_id).map_or(0, Vec::len)
    }

    pub fn latest(&self, structure_id: &str) -> Option<Arc<FrameSnapshot>> {
        self.state.read().latest.get(structure_id).cloned()
    }

    /// Offers a snapshot to every subscriber of its structure; returns how
    /// many were reached.
    pub fn broadcast_snapshot(&self, snapshot: Arc<FrameSnapshot>) -> usize {
        let slots = {
            let mut state = self.state.write();
            state.latest.insert(snapshot.structure_id.clone(), snapshot.clone());
            state.subscribers.get(&snapshot.structure_id).cloned().unwrap_or_default()
        };
        let mut delivered = 0;
        let mut closed = Vec::new();
        for slot in &slots {
            match slot.offer_pose(&snapshot) {
                Offer::Delivered => delivered += 1,
                Offer::Skipped => {}
                Offer::Closed => closed.push(slot.id),
            }
        }
        self.prune(&snapshot.structure_id, &closed);
        delivered
    }

    /// Queues a warning for every subscriber of its structure. Subscribers
    /// whose warning backlog is full are disconnected.
    pub fn broadcast_warning(&self, event: Arc<WarningEvent>) -> usize {
        let slots = self.state.read().subscribers.get(&event.structure_id).cloned().unwrap_or_default();
        let mut delivered = 0;
        let mut closed = Vec::new();
        for slot in &slots {
            match slot.offer_warning(&event, self.warning_limit) {
                Offer::Delivered => delivered += 1,
                Offer::Skipped => {}
                Offer::Closed => closed.push(slot.id),
            }
        }
        self.prune(&event.structure_id, &closed);
        delivered
    }

    fn prune(&self, structure_id: &str, ids: &[u64]) {
        if ids.is_empty() {
            return;
        }
        let mut state = self.state.write();
        if let Some(list) = state.subscribers.get_mut(structure_id) {
            list.retain(|s| !ids.contains(&s.id));
        }
    }

    fn unsubscribe(&self, slot: &Slot) {
        self.prune(&slot.structure_id, &[slot.id]);
    }
}

/// Receiving end of one subscription. Dropping it unsubscribes.
#[derive(Debug)]
pub struct Subscription {
    slot: Arc<Slot>,
    hub: std::sync::Weak<Hub>,
}

impl Subscription {
    pub fn structure_id(&self) -> &str {
        &self.slot.structure_id
    }

    pub fn id(&self) -> u64 {
        self.slot.id
    }

    /// Next queued event, or `None` once the subscription is closed.
    pub async fn recv(&mut self) -> Option<OutboundFrame> {
        loop {
            match self.poll_queue() {
                Ok(frame) => return Some(frame),
                Err(true) => return None,
                Err(false) => self.slot.notify.notified().await,
            }
        }
    }

    /// Non-blocking variant of [`Self::recv`]; `None` when nothing is queued
    /// or the subscription is closed.
    pub fn try_recv(&mut self) -> Option<OutboundFrame> {
        self.poll_queue().ok()
    }

    pub fn is_closed(&self) -> bool {
        self.slot.queue.lock().closed
    }

    /// Drains everything currently queued.
    pub fn drain(&mut self) -> Vec<OutboundFrame> {
        std::iter::from_fn(|| self.try_recv()).collect()
    }

    fn poll_queue(&self) -> Result<OutboundFrame, bool> {
        let mut q = self.slot.queue.lock();
        match q.items.pop_front() {
            Some(event) => {
                if matches!(event, Outbound::Warning(_)) {
                    q.warnings -= 1;
                }
                let seq = q.next_seq;
                q.next_seq += 1;
                Ok(OutboundFrame { seq, event })
            }
            None => Err(q.closed),
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.slot.close();
        if let Some(hub) = self.hub.upgrade() {
            hub.unsubscribe(&self.slot);
        }
    }
}
