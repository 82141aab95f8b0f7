//! Heartbeat registry and event broadcast.
//!
//! [`Monitor`] wraps a [`MonitorState`] behind one lock and runs a detection
//! thread. Each subscription receives the compacted snapshot first and then
//! live events; consumers drop anything at or below the last seq they saw.

mod event;
pub mod remote;
mod state;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};
use parking_lot::Mutex;

pub use event::{ClusterEvent, EventBody, WorkerId};
pub use state::{MonitorConfig, MonitorState, WorkerRecord, WorkerStatus};

use crate::placement::PlacementTable;
use crate::{Error, Result};

/// What workers need from the monitor. Implemented by the in-process
/// [`MonitorHandle`] and the TCP [`remote::RemoteMonitor`].
pub trait ControlPlane: Send + Sync {
    fn register(&self, worker: WorkerId) -> Result<()>;
    fn heartbeat(&self, worker: WorkerId) -> Result<()>;
    fn subscribe(&self) -> Result<Subscription>;
}

/// An ordered event stream with seq-based deduplication.
pub struct Subscription {
    rx: Receiver<ClusterEvent>,
    last_seq: u64,
}

impl Subscription {
    pub fn new(rx: Receiver<ClusterEvent>) -> Self {
        Subscription { rx, last_seq: 0 }
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    fn accept(&mut self, ev: ClusterEvent) -> Option<ClusterEvent> {
        if ev.seq <= self.last_seq {
            return None;
        }
        self.last_seq = ev.seq;
        Some(ev)
    }

    /// Next new event if one is queued. `Err(MonitorDown)` once the stream
    /// is gone and drained.
    pub fn try_next(&mut self) -> Result<Option<ClusterEvent>> {
        loop {
            match self.rx.try_recv() {
                Ok(ev) => {
                    if let Some(ev) = self.accept(ev) {
                        return Ok(Some(ev));
                    }
                }
                Err(TryRecvError::Empty) => return Ok(None),
                Err(TryRecvError::Disconnected) => return Err(Error::MonitorDown),
            }
        }
    }

    pub fn next_timeout(&mut self, timeout: Duration) -> Result<Option<ClusterEvent>> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.rx.recv_deadline(deadline) {
                Ok(ev) => {
                    if let Some(ev) = self.accept(ev) {
                        return Ok(Some(ev));
                    }
                }
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::MonitorDown),
            }
        }
    }

    /// All currently queued new events.
    pub fn drain(&mut self) -> Result<Vec<ClusterEvent>> {
        let mut out = Vec::new();
        while let Some(ev) = self.try_next()? {
            out.push(ev);
        }
        Ok(out)
    }
}

struct Shared {
    config: MonitorConfig,
    origin: Instant,
    state: Mutex<MonitorState>,
    subscribers: Mutex<Vec<Sender<ClusterEvent>>>,
    alive: AtomicBool,
}

impl Shared {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn check_alive(&self) -> Result<()> {
        if self.alive.load(Ordering::Acquire) {
            Ok(())
        } else {
            Err(Error::MonitorDown)
        }
    }

    /// Must be called with the state lock held so broadcast order matches
    /// seq order.
    fn broadcast(&self, events: &[ClusterEvent]) {
        if events.is_empty() {
            return;
        }
        let mut subs = self.subscribers.lock();
        subs.retain(|tx| events.iter().all(|ev| tx.send(ev.clone()).is_ok()));
    }

    fn run_detection(&self) {
        let mut state = self.state.lock();
        let events = state.detect(self.now(), self.config.timeout);
        for ev in &events {
            log::info!("monitor: seq {} {:?}", ev.seq, ev.body);
        }
        self.broadcast(&events);
    }
}

/// Cloneable access to a running monitor.
#[derive(Clone)]
pub struct MonitorHandle {
    shared: Arc<Shared>,
}

impl MonitorHandle {
    pub fn config(&self) -> MonitorConfig {
        self.shared.config
    }

    pub fn is_alive(&self) -> bool {
        self.shared.alive.load(Ordering::Acquire)
    }

    pub fn publish_placement(&self, table: PlacementTable) -> Result<u64> {
        self.shared.check_alive()?;
        let mut state = self.shared.state.lock();
        let ev = state.publish_placement(table);
        let seq = ev.seq;
        self.shared.broadcast(&[ev]);
        Ok(seq)
    }

    pub fn is_online(&self, worker: WorkerId) -> bool {
        self.shared.state.lock().is_online(worker)
    }

    pub fn record(&self, worker: WorkerId) -> Option<WorkerRecord> {
        self.shared.state.lock().record(worker).copied()
    }

    /// Monitor-relative time, the clock heartbeats are stamped with.
    pub fn now(&self) -> Duration {
        self.shared.now()
    }

    /// Runs one detection pass immediately.
    pub fn detect_now(&self) {
        self.shared.run_detection();
    }

    /// Stops the monitor: subscriptions end and every call fails.
    pub fn kill(&self) {
        self.shared.alive.store(false, Ordering::Release);
        self.shared.subscribers.lock().clear();
    }
}

impl ControlPlane for MonitorHandle {
    fn register(&self, worker: WorkerId) -> Result<()> {
        self.shared.check_alive()?;
        let mut state = self.shared.state.lock();
        if let Some(ev) = state.register(worker, self.shared.now()) {
            self.shared.broadcast(&[ev]);
        }
        Ok(())
    }

    fn heartbeat(&self, worker: WorkerId) -> Result<()> {
        self.shared.check_alive()?;
        let mut state = self.shared.state.lock();
        if let Some(ev) = state.heartbeat(worker, self.shared.now())? {
            self.shared.broadcast(&[ev]);
        }
        Ok(())
    }

    fn subscribe(&self) -> Result<Subscription> {
        self.shared.check_alive()?;
        let (tx, rx) = unbounded();
        let state = self.shared.state.lock();
        for ev in state.snapshot() {
            let _ = tx.send(ev);
        }
        self.shared.subscribers.lock().push(tx);
        Ok(Subscription::new(rx))
    }
}

/// The monitor service: state plus its detection thread.
pub struct Monitor {
    handle: MonitorHandle,
    detector: Option<JoinHandle<()>>,
}

impl Monitor {
    pub fn start(config: MonitorConfig) -> Monitor {
        let shared = Arc::new(Shared {
            config,
            origin: Instant::now(),
            state: Mutex::new(MonitorState::new()),
            subscribers: Mutex::new(Vec::new()),
            alive: AtomicBool::new(true),
        });
        let bg = shared.clone();
        let detector = std::thread::Builder::new()
            .name("monitor-detect".into())
            .spawn(move || {
                while bg.alive.load(Ordering::Acquire) {
                    std::thread::sleep(bg.config.detection_period);
                    if !bg.alive.load(Ordering::Acquire) {
                        break;
                    }
                    bg.run_detection();
                }
            })
            .expect("spawn monitor thread");
        Monitor {
            handle: MonitorHandle { shared },
            detector: Some(detector),
        }
    }

    pub fn handle(&self) -> MonitorHandle {
        self.handle.clone()
    }

    pub fn kill(&mut self) {
        self.handle.kill();
        if let Some(t) = self.detector.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Monitor {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Sends heartbeats for `worker` every `period` until `stop` is set.
/// Errors (monitor down) are ignored; the worker keeps serving.
pub fn spawn_heartbeat(
    control: Arc<dyn ControlPlane>,
    worker: WorkerId,
    period: Duration,
    stop: Arc<AtomicBool>,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(format!("heartbeat-{worker}"))
        .spawn(move || {
            while !stop.load(Ordering::Acquire) {
                let _ = control.heartbeat(worker);
                let mut slept = Duration::ZERO;
                while slept < period && !stop.load(Ordering::Acquire) {
                    let step = Duration::from_millis(5).min(period - slept);
                    std::thread::sleep(step);
                    slept += step;
                }
            }
        })
        .expect("spawn heartbeat thread")
}
