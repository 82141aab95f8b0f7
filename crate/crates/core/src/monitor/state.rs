//! Clock-free monitor bookkeeping. Time is passed in, so detection can be
//! tested against hand-picked instants.

use std::collections::BTreeMap;
use std::time::Duration;

use super::event::{ClusterEvent, EventBody, WorkerId};
use crate::placement::PlacementTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorConfig {
    pub heartbeat_period: Duration,
    pub timeout: Duration,
    pub detection_period: Duration,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            heartbeat_period: Duration::from_millis(100),
            timeout: Duration::from_millis(300),
            detection_period: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerStatus {
    Alive,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerRecord {
    pub worker: WorkerId,
    pub last_heartbeat: Duration,
    pub status: WorkerStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Subject {
    Worker(WorkerId),
    Placement,
}

#[derive(Debug, Default)]
pub struct MonitorState {
    workers: BTreeMap<WorkerId, WorkerRecord>,
    next_seq: u64,
    /// Latest event per subject; replayed to late subscribers.
    latest: BTreeMap<Subject, ClusterEvent>,
}

impl MonitorState {
    pub fn new() -> Self {
        Self::default()
    }

    fn emit(&mut self, body: EventBody) -> ClusterEvent {
        self.next_seq += 1;
        let subject = match &body {
            EventBody::WorkerOnline(w) | EventBody::WorkerOffline(w) => Subject::Worker(*w),
            EventBody::Placement(_) => Subject::Placement,
        };
        let ev = ClusterEvent {
            seq: self.next_seq,
            body,
        };
        self.latest.insert(subject, ev.clone());
        ev
    }

    /// Adds a worker, or revives an offline one. Emits `WorkerOnline` unless
    /// the worker was already alive.
    pub fn register(&mut self, worker: WorkerId, now: Duration) -> Option<ClusterEvent> {
        let prev = self.workers.insert(
            worker,
            WorkerRecord {
                worker,
                last_heartbeat: now,
                status: WorkerStatus::Alive,
            },
        );
        match prev {
            Some(r) if r.status == WorkerStatus::Alive => None,
            _ => Some(self.emit(EventBody::WorkerOnline(worker))),
        }
    }

    pub fn heartbeat(&mut self, worker: WorkerId, now: Duration) -> Result<Option<ClusterEvent>> {
        let rec = self
            .workers
            .get_mut(&worker)
            .ok_or_else(|| Error::Registration(worker.to_string()))?;
        rec.last_heartbeat = rec.last_heartbeat.max(now);
        if rec.status == WorkerStatus::Offline {
            rec.status = WorkerStatus::Alive;
            return Ok(Some(self.emit(EventBody::WorkerOnline(worker))));
        }
        Ok(None)
    }

    /// Flips every alive worker whose heartbeat is older than `timeout`.
    pub fn detect(&mut self, now: Duration, timeout: Duration) -> Vec<ClusterEvent> {
        let expired: Vec<WorkerId> = self
            .workers
            .values()
            .filter(|r| {
                r.status == WorkerStatus::Alive && now.saturating_sub(r.last_heartbeat) > timeout
            })
            .map(|r| r.worker)
            .collect();
        expired
            .into_iter()
            .map(|w| {
                self.workers.get_mut(&w).unwrap().status = WorkerStatus::Offline;
                self.emit(EventBody::WorkerOffline(w))
            })
            .collect()
    }

    pub fn publish_placement(&mut self, table: PlacementTable) -> ClusterEvent {
        self.emit(EventBody::Placement(table))
    }

    pub fn record(&self, worker: WorkerId) -> Option<&WorkerRecord> {
        self.workers.get(&worker)
    }

    pub fn is_online(&self, worker: WorkerId) -> bool {
        self.record(worker)
            .is_some_and(|r| r.status == WorkerStatus::Alive)
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq
    }

    /// Latest event per worker plus the latest placement, in seq order.
    pub fn snapshot(&self) -> Vec<ClusterEvent> {
        let mut evs: Vec<ClusterEvent> = self.latest.values().cloned().collect();
        evs.sort_by_key(|e| e.seq);
        evs
    }
}
