//! The expert server: a stateless loop over shared slot regions.
//!
//! Clients write requests into slots the server registered for them during
//! the handshake. The loop scans slot flags, aggregates ready slots into a
//! dynamic batch, computes the grouped expert outputs, and publishes results
//! in place. It never sends anything to a client.

pub mod batch;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::model::ModelWeights;
use crate::monitor::{ClusterEvent, ControlPlane, EventBody, Subscription, WorkerId};
use crate::par::ExecPolicy;
use crate::protocol::{
    self, server_mark_offline, server_publish, server_read_request, server_reallocate, SlotHeader,
    SlotState, PAYLOAD_OFFSET,
};
use crate::transport::tcp::TcpAgent;
use crate::transport::{HandshakeHandler, Region, RegionDescriptor, ServerMemory, ServerNode};
use crate::{ClientId, Error, ExpertId, Result, ServerId};

pub use batch::{
    aggregate_batch, group_shrink, grouped_forward, ragged_iter, ragged_iter_with, reorganize,
    scatter, DynamicBatch, ExpertGroup, ExpertGroups, ReadySlot, Reorganized, RowOrigin, SlotKey,
    SlotSource, DEFAULT_GRID_WIDTH,
};

/// Slots registered per client; requests alternate by seq parity.
pub const SLOTS_PER_CLIENT: u8 = 2;

/// Simulated device time charged per batch, so throughput experiments are
/// bound by service time rather than the host CPU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServiceTime {
    pub per_batch: Duration,
    pub per_row: Duration,
}

impl ServiceTime {
    pub fn for_rows(&self, rows: usize) -> Duration {
        self.per_batch + self.per_row * rows as u32
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub server_id: ServerId,
    /// Serve over TCP on this address when set.
    pub listen_addr: Option<String>,
    pub hosted_experts: Vec<ExpertId>,
    pub min_rows: usize,
    pub max_wait: Duration,
    pub heartbeat_period: Duration,
    pub max_rows_per_slot: usize,
    pub service_time: ServiceTime,
    pub idle_sleep: Duration,
    pub grid_width: usize,
    pub exec: ExecPolicy,
}

impl ServerConfig {
    pub fn new(server_id: ServerId, hosted_experts: Vec<ExpertId>) -> Self {
        ServerConfig {
            server_id,
            listen_addr: None,
            hosted_experts,
            min_rows: 1,
            max_wait: Duration::from_micros(200),
            heartbeat_period: Duration::from_millis(100),
            max_rows_per_slot: 4096,
            service_time: ServiceTime::default(),
            idle_sleep: Duration::from_micros(50),
            grid_width: DEFAULT_GRID_WIDTH,
            exec: ExecPolicy::default(),
        }
    }
}

#[derive(Debug, Default)]
pub struct ServerMetrics {
    pub batches: AtomicU64,
    pub rows_processed: AtomicU64,
    pub bad_crc_slots: AtomicU64,
    pub stale_slots: AtomicU64,
    pub foreign_rows: AtomicU64,
    pub voided_rows: AtomicU64,
    pub released_clients: AtomicU64,
    batch_rows: Mutex<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerMetricsSnapshot {
    pub batches: u64,
    pub rows_processed: u64,
    pub bad_crc_slots: u64,
    pub stale_slots: u64,
    pub foreign_rows: u64,
    pub voided_rows: u64,
    pub released_clients: u64,
    pub batch_rows: Vec<usize>,
}

impl ServerMetrics {
    pub fn snapshot(&self) -> ServerMetricsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ServerMetricsSnapshot {
            batches: g(&self.batches),
            rows_processed: g(&self.rows_processed),
            bad_crc_slots: g(&self.bad_crc_slots),
            stale_slots: g(&self.stale_slots),
            foreign_rows: g(&self.foreign_rows),
            voided_rows: g(&self.voided_rows),
            released_clients: g(&self.released_clients),
            batch_rows: self.batch_rows.lock().clone(),
        }
    }
}

struct SlotEntry {
    region: Arc<Region>,
    last_seq: u64,
    /// Region checksum of an image that failed validation; skipped until the
    /// client rewrites the slot.
    poisoned: Option<u32>,
}

/// Per-client slot regions. Also the server's handshake callback.
pub struct SlotRegistry {
    memory: Arc<ServerMemory>,
    slot_len: usize,
    slots: Mutex<BTreeMap<SlotKey, SlotEntry>>,
}

impl SlotRegistry {
    pub fn new(memory: Arc<ServerMemory>, hidden_dim: usize, max_rows_per_slot: usize) -> Self {
        SlotRegistry {
            memory,
            slot_len: protocol::slot_len(hidden_dim, max_rows_per_slot),
            slots: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn slot_len(&self) -> usize {
        self.slot_len
    }

    pub fn clients(&self) -> BTreeSet<ClientId> {
        self.slots.lock().keys().map(|k| k.client).collect()
    }

    pub fn region(&self, key: SlotKey) -> Option<Arc<Region>> {
        self.slots.lock().get(&key).map(|e| e.region.clone())
    }

    fn drop_client(&self, slots: &mut BTreeMap<SlotKey, SlotEntry>, client: ClientId) -> u64 {
        let keys: Vec<SlotKey> = slots.keys().filter(|k| k.client == client).copied().collect();
        let mut voided = 0;
        for key in keys {
            let entry = slots.remove(&key).unwrap();
            let region = &entry.region;
            if let Ok(flag) = region.read_local(0, PAYLOAD_OFFSET) {
                if flag[0] == SlotState::ClientWriteDone as u8 {
                    if let Ok(h) = SlotHeader::from_bytes(&flag[protocol::HEADER_OFFSET..]) {
                        voided += h.num_rows as u64;
                    }
                }
            }
            let _ = server_mark_offline(region);
            let _ = server_reallocate(region);
            self.memory.deregister(region.descriptor().region_id);
        }
        voided
    }

    /// Releases every slot of `client`: state 3, then zeroed and state 0,
    /// then deregistered. Returns the rows of requests left unanswered.
    pub fn release_client(&self, client: ClientId) -> u64 {
        let mut slots = self.slots.lock();
        self.drop_client(&mut slots, client)
    }

    fn scan(&self, taken: &BTreeSet<SlotKey>, metrics: &ServerMetrics) -> Vec<ReadySlot> {
        let mut slots = self.slots.lock();
        let mut ready = Vec::new();
        for (key, entry) in slots.iter_mut() {
            if taken.contains(key) {
                continue;
            }
            match entry.region.read_local(0, 1) {
                Ok(flag) if flag[0] == SlotState::ClientWriteDone as u8 => {}
                _ => continue,
            }
            if let Some(sum) = entry.poisoned {
                if entry.region.checksum() == sum {
                    continue;
                }
                entry.poisoned = None;
            }
            match server_read_request(&entry.region) {
                Ok(Some((header, rows))) => {
                    if header.request_seq <= entry.last_seq {
                        metrics.stale_slots.fetch_add(1, Ordering::Relaxed);
                        entry.poisoned = Some(entry.region.checksum());
                        continue;
                    }
                    ready.push(ReadySlot {
                        key: *key,
                        region: Some(entry.region.clone()),
                        header,
                        rows,
                    });
                }
                Ok(None) => {}
                Err(e) => {
                    log::warn!(
                        "{} slot {}/{}: {e}",
                        self.memory.owner(),
                        key.client,
                        key.index
                    );
                    metrics.bad_crc_slots.fetch_add(1, Ordering::Relaxed);
                    entry.poisoned = Some(entry.region.checksum());
                }
            }
        }
        ready
    }

    fn mark_taken(&self, key: SlotKey, seq: u64) {
        if let Some(e) = self.slots.lock().get_mut(&key) {
            e.last_seq = e.last_seq.max(seq);
        }
    }
}

impl HandshakeHandler for SlotRegistry {
    fn accept(&self, client: ClientId, _: &[RegionDescriptor]) -> Result<Vec<RegionDescriptor>> {
        let mut slots = self.slots.lock();
        self.drop_client(&mut slots, client);
        let mut out = Vec::with_capacity(SLOTS_PER_CLIENT as usize);
        for index in 0..SLOTS_PER_CLIENT {
            let region = self.memory.register(self.slot_len);
            out.push(region.descriptor());
            slots.insert(
                SlotKey { client, index },
                SlotEntry {
                    region,
                    last_seq: 0,
                    poisoned: None,
                },
            );
        }
        Ok(out)
    }
}

/// What one processed batch did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchReport {
    pub entries: usize,
    pub rows: usize,
    pub rejected_entries: usize,
}

struct Shared {
    config: ServerConfig,
    weights: Arc<ModelWeights>,
    registry: Arc<SlotRegistry>,
    node: Arc<ServerNode>,
    hosted: RwLock<Vec<ExpertId>>,
    metrics: ServerMetrics,
    stop: AtomicBool,
    hung: AtomicBool,
}

/// The serve loop's state, usable step by step without a thread.
#[derive(Clone)]
pub struct ServerCore {
    shared: Arc<Shared>,
}

impl ServerCore {
    pub fn new(mut config: ServerConfig, weights: Arc<ModelWeights>) -> Result<Self> {
        let spec = &weights.spec;
        config.hosted_experts.sort_unstable();
        config.hosted_experts.dedup();
        if let Some(&e) = config
            .hosted_experts
            .iter()
            .find(|&&e| e as usize >= spec.num_experts)
        {
            return Err(Error::Config(format!(
                "{} hosts expert {e} but the model has {}",
                config.server_id, spec.num_experts
            )));
        }
        let memory = Arc::new(ServerMemory::new(config.server_id));
        let registry = Arc::new(SlotRegistry::new(
            memory.clone(),
            spec.hidden_dim,
            config.max_rows_per_slot,
        ));
        let node = ServerNode::new(memory, registry.clone());
        Ok(ServerCore {
            shared: Arc::new(Shared {
                hosted: RwLock::new(config.hosted_experts.clone()),
                config,
                weights,
                registry,
                node,
                metrics: ServerMetrics::default(),
                stop: AtomicBool::new(false),
                hung: AtomicBool::new(false),
            }),
        })
    }

    pub fn id(&self) -> ServerId {
        self.shared.config.server_id
    }

    pub fn node(&self) -> Arc<ServerNode> {
        self.shared.node.clone()
    }

    pub fn registry(&self) -> &Arc<SlotRegistry> {
        &self.shared.registry
    }

    pub fn metrics(&self) -> ServerMetricsSnapshot {
        self.shared.metrics.snapshot()
    }

    pub fn hosted_experts(&self) -> Vec<ExpertId> {
        self.shared.hosted.read().clone()
    }

    /// Adds experts to the hosted set. Hosted sets only grow while serving,
    /// so requests routed under an older placement stay valid.
    pub fn host_experts(&self, experts: &[ExpertId]) {
        let mut hosted = self.shared.hosted.write();
        hosted.extend_from_slice(experts);
        hosted.sort_unstable();
        hosted.dedup();
    }

    pub fn scan_ready(&self, taken: &BTreeSet<SlotKey>) -> Vec<ReadySlot> {
        self.shared.registry.scan(taken, &self.shared.metrics)
    }

    pub fn release_client(&self, client: ClientId) -> u64 {
        let voided = self.shared.registry.release_client(client);
        self.shared
            .metrics
            .voided_rows
            .fetch_add(voided, Ordering::Relaxed);
        self.shared
            .metrics
            .released_clients
            .fetch_add(1, Ordering::Relaxed);
        voided
    }

    /// Computes and publishes one batch. Entries that fail validation get a
    /// zero-row response.
    pub fn process(&self, batch: DynamicBatch) -> BatchReport {
        let shared = &self.shared;
        let hosted = self.hosted_experts();
        let spec = &shared.weights.spec;
        for entry in &batch.entries {
            shared.registry.mark_taken(entry.key, entry.header.request_seq);
        }
        let (valid, invalid): (Vec<ReadySlot>, Vec<ReadySlot>) =
            batch.entries.into_iter().partition(|e| {
                e.header.hidden_dim as usize == spec.hidden_dim
                    && (e.header.layer_id as usize) < spec.num_layers
                    && e.rows.iter().all(|r| hosted.binary_search(&r.expert_id).is_ok())
            });
        let mut report = BatchReport {
            entries: valid.len() + invalid.len(),
            rejected_entries: invalid.len(),
            rows: 0,
        };
        for entry in &invalid {
            log::warn!(
                "{}: rejecting request {} from {}: rows outside hosted set or model shape",
                shared.config.server_id,
                entry.header.request_seq,
                entry.key.client
            );
            shared
                .metrics
                .foreign_rows
                .fetch_add(entry.rows.len() as u64, Ordering::Relaxed);
            if let Some(region) = &entry.region {
                let _ = server_publish(region, &entry.header, &[]);
            }
        }
        if valid.is_empty() {
            return report;
        }
        let started = Instant::now();
        let total: usize = valid.iter().map(|e| e.rows.len()).sum();
        let batch = DynamicBatch {
            entries: valid,
            total_rows: total,
            formed_at: batch.formed_at,
        };
        let outputs = reorganize(&batch, &hosted).and_then(|r| {
            let out = grouped_forward(&r, &shared.weights, shared.config.exec, shared.config.grid_width)?;
            Ok(scatter(&r.groups, &out, &batch.entries.iter().map(|e| e.rows.len()).collect::<Vec<_>>()))
        });
        let outputs = match outputs {
            Ok(o) => o,
            Err(e) => {
                log::warn!("{}: batch failed: {e}", shared.config.server_id);
                for entry in &batch.entries {
                    if let Some(region) = &entry.region {
                        let _ = server_publish(region, &entry.header, &[]);
                    }
                }
                report.rejected_entries += batch.entries.len();
                return report;
            }
        };
        let service = shared.config.service_time.for_rows(total);
        if let Some(rest) = service.checked_sub(started.elapsed()) {
            std::thread::sleep(rest);
        }
        if shared.stop.load(Ordering::Acquire) || !shared.node.is_alive() {
            return report;
        }
        for (entry, out) in batch.entries.iter().zip(&outputs) {
            if let Some(region) = &entry.region {
                if let Err(e) = server_publish(region, &entry.header, out) {
                    log::warn!("{}: publish failed: {e}", shared.config.server_id);
                }
            }
        }
        shared.metrics.batches.fetch_add(1, Ordering::Relaxed);
        shared
            .metrics
            .rows_processed
            .fetch_add(total as u64, Ordering::Relaxed);
        shared.metrics.batch_rows.lock().push(total);
        report.rows = total;
        report
    }

    /// One non-blocking pass: scan, and process whatever is ready.
    pub fn poll_once(&self) -> Option<BatchReport> {
        let ready = self.scan_ready(&BTreeSet::new());
        if ready.is_empty() {
            return None;
        }
        let total = ready.iter().map(|r| r.rows.len()).sum();
        Some(self.process(DynamicBatch {
            entries: ready,
            total_rows: total,
            formed_at: Instant::now(),
        }))
    }

    fn handle_event(&self, ev: &ClusterEvent) {
        if let EventBody::WorkerOffline(WorkerId::Client(c)) = ev.body {
            let voided = self.release_client(c);
            log::info!(
                "{}: released slots of {c} ({voided} rows voided)",
                self.id()
            );
        }
    }
}

struct LoopSource<'a> {
    core: &'a ServerCore,
    control: Option<&'a Arc<dyn ControlPlane>>,
    subscription: &'a mut Option<Subscription>,
    next_heartbeat: Instant,
}

impl LoopSource<'_> {
    fn should_run(&self) -> bool {
        let s = &self.core.shared;
        !s.stop.load(Ordering::Acquire) && s.node.is_alive()
    }

    fn housekeeping(&mut self) {
        let s = &self.core.shared;
        while s.hung.load(Ordering::Acquire) && self.should_run() {
            std::thread::sleep(Duration::from_millis(1));
        }
        let now = Instant::now();
        if now >= self.next_heartbeat {
            if let Some(c) = self.control {
                if let Err(e) = c.heartbeat(WorkerId::server(self.core.id())) {
                    log::debug!("{}: heartbeat failed: {e}", self.core.id());
                }
            }
            self.next_heartbeat = now + s.config.heartbeat_period;
        }
        if let Some(sub) = self.subscription.as_mut() {
            match sub.drain() {
                Ok(events) => events.iter().for_each(|ev| self.core.handle_event(ev)),
                Err(_) => {
                    log::warn!("{}: monitor stream lost", self.core.id());
                    *self.subscription = None;
                }
            }
        }
    }
}

impl SlotSource for LoopSource<'_> {
    fn scan(&mut self, taken: &BTreeSet<SlotKey>) -> Vec<ReadySlot> {
        self.core.scan_ready(taken)
    }

    fn idle(&mut self) -> bool {
        std::thread::sleep(self.core.shared.config.idle_sleep);
        self.housekeeping();
        self.should_run()
    }
}

fn serve_loop(core: ServerCore, control: Option<Arc<dyn ControlPlane>>) {
    let mut subscription = control.as_ref().and_then(|c| c.subscribe().ok());
    let mut source = LoopSource {
        core: &core,
        control: control.as_ref(),
        subscription: &mut subscription,
        next_heartbeat: Instant::now(),
    };
    let (min_rows, max_wait) = (core.shared.config.min_rows, core.shared.config.max_wait);
    while source.should_run() {
        source.housekeeping();
        if !source.should_run() {
            break;
        }
        if let Some(batch) = aggregate_batch(&mut source, min_rows, max_wait) {
            if source.should_run() {
                core.process(batch);
            }
        }
    }
    log::debug!("{}: serve loop exited", core.id());
}

/// A running server: serve loop thread plus an optional TCP agent.
pub struct ExpertServer {
    core: ServerCore,
    thread: Option<JoinHandle<()>>,
    tcp: Option<TcpAgent>,
}

impl ExpertServer {
    pub fn start(
        config: ServerConfig,
        weights: Arc<ModelWeights>,
        control: Option<Arc<dyn ControlPlane>>,
    ) -> Result<Self> {
        let core = ServerCore::new(config, weights)?;
        let tcp = match &core.shared.config.listen_addr {
            Some(addr) => Some(TcpAgent::spawn(core.node(), addr)?),
            None => None,
        };
        if let Some(c) = &control {
            if let Err(e) = c.register(WorkerId::server(core.id())) {
                log::warn!("{}: monitor registration failed: {e}", core.id());
            }
        }
        let loop_core = core.clone();
        let thread = std::thread::Builder::new()
            .name(format!("{}", core.id()))
            .spawn(move || serve_loop(loop_core, control))?;
        Ok(ExpertServer {
            core,
            thread: Some(thread),
            tcp,
        })
    }

    pub fn core(&self) -> &ServerCore {
        &self.core
    }

    pub fn id(&self) -> ServerId {
        self.core.id()
    }

    pub fn node(&self) -> Arc<ServerNode> {
        self.core.node()
    }

    pub fn tcp_addr(&self) -> Option<std::net::SocketAddr> {
        self.tcp.as_ref().map(|t| t.addr())
    }

    pub fn metrics(&self) -> ServerMetricsSnapshot {
        self.core.metrics()
    }

    /// Crash: the node stops answering transport operations and the loop
    /// exits without publishing anything further.
    pub fn kill(&mut self) {
        self.core.shared.node.kill();
        if let Some(t) = self.tcp.as_mut() {
            t.kill();
        }
        self.join();
    }

    /// Freeze the loop (no scanning, no heartbeats) while memory stays
    /// reachable, as a wedged process would.
    pub fn hang(&self) {
        self.core.shared.hung.store(true, Ordering::Release);
    }

    pub fn resume(&self) {
        self.core.shared.hung.store(false, Ordering::Release);
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }

    pub fn shutdown(&mut self) {
        self.core.shared.stop.store(true, Ordering::Release);
        self.join();
        if let Some(t) = self.tcp.as_mut() {
            t.kill();
        }
    }

    fn join(&mut self) {
        self.core.shared.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ExpertServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
