//! The attention client: dense stub, routing, dispatch to expert servers,
//! failover, and two-micro-batch pipelining.
//!
//! All remote work of one layer for one micro-batch is an [`InFlight`]: one
//! sub-request per target server plus the rows waiting for a free slot.
//! Server outputs arrive already weighted by the router score; the client
//! sums them per token in `(token, k)` order, which is ascending expert id,
//! the same order the oracle uses. Which replica computed a row therefore
//! never changes the result.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::model::{dense_stub, gate_logits, route_with, Matrix, ModelWeights, RoutingDecision};
use crate::monitor::{spawn_heartbeat, ControlPlane, EventBody, Subscription, WorkerId};
use crate::par::ExecPolicy;
use crate::placement::{select_server, LivenessMask, PlacementTable};
use crate::protocol::{client_poll, client_submit, ClientSlot, PollOutcome, RequestRow, SlotHeader, SlotState};
use crate::transport::{Completion, Connection, Fabric};
use crate::{ClientId, Error, ExpertId, Result, ServerId};

/// Rows bound for one server. `origin[i]` is the `(token, k)` pair of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubRequest {
    pub server: ServerId,
    pub rows: Vec<RequestRow>,
    pub origin: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub placement_version: u64,
    pub num_tokens: usize,
    pub top_k: usize,
    pub per_server: BTreeMap<ServerId, SubRequest>,
}

impl DispatchPlan {
    pub fn row_counts(&self) -> BTreeMap<ServerId, usize> {
        self.per_server
            .iter()
            .map(|(s, r)| (*s, r.rows.len()))
            .collect()
    }
}

fn group_rows(
    rows: impl IntoIterator<Item = (RequestRow, (usize, usize))>,
    placement: &PlacementTable,
    mask: &LivenessMask,
) -> Result<BTreeMap<ServerId, SubRequest>> {
    let mut per_server: BTreeMap<ServerId, SubRequest> = BTreeMap::new();
    for (row, origin) in rows {
        let server = select_server(row.expert_id, placement, mask, row.token_tag)?;
        let sub = per_server.entry(server).or_insert_with(|| SubRequest {
            server,
            rows: Vec::new(),
            origin: Vec::new(),
        });
        sub.rows.push(row);
        sub.origin.push(origin);
    }
    Ok(per_server)
}

/// One request row per `(token, k)`, targeted by [`select_server`] and kept
/// in `(token, k)` order within each server.
pub fn build_dispatch(
    hidden: &Matrix,
    routing: &RoutingDecision,
    placement: &PlacementTable,
    mask: &LivenessMask,
) -> Result<DispatchPlan> {
    let n = routing.num_tokens();
    if n != hidden.rows() {
        return Err(Error::rejected(format!(
            "routing covers {n} tokens, hidden has {}",
            hidden.rows()
        )));
    }
    let rows = (0..n).flat_map(|t| {
        routing
            .experts(t)
            .iter()
            .zip(routing.token_scores(t))
            .enumerate()
            .map(move |(k, (&e, &s))| {
                (
                    RequestRow {
                        hidden: hidden.row(t).to_vec(),
                        expert_id: e,
                        router_score: s,
                        token_tag: t as u32,
                    },
                    (t, k),
                )
            })
    });
    Ok(DispatchPlan {
        placement_version: placement.version,
        num_tokens: n,
        top_k: routing.top_k,
        per_server: group_rows(rows, placement, mask)?,
    })
}

/// Collected weighted rows, one per `(token, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responses {
    num_tokens: usize,
    top_k: usize,
    hidden_dim: usize,
    rows: Vec<Option<Vec<f32>>>,
    filled: usize,
}

impl Responses {
    pub fn new(num_tokens: usize, top_k: usize, hidden_dim: usize) -> Self {
        Responses {
            num_tokens,
            top_k,
            hidden_dim,
            rows: vec![None; num_tokens * top_k],
            filled: 0,
        }
    }

    pub fn for_plan(plan: &DispatchPlan, hidden_dim: usize) -> Self {
        Self::new(plan.num_tokens, plan.top_k, hidden_dim)
    }

    /// Stores `outputs` (row-major, one row per origin). A pair already
    /// answered keeps its first value.
    pub fn insert(&mut self, origin: &[(usize, usize)], outputs: &[f32]) -> Result<()> {
        let d = self.hidden_dim;
        if outputs.len() != origin.len() * d {
            return Err(Error::protocol(format!(
                "response carries {} values for {} rows of width {d}",
                outputs.len(),
                origin.len()
            )));
        }
        for (i, &(t, k)) in origin.iter().enumerate() {
            let slot = &mut self.rows[t * self.top_k + k];
            if slot.is_none() {
                *slot = Some(outputs[i * d..(i + 1) * d].to_vec());
                self.filled += 1;
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.filled == self.rows.len()
    }

    pub fn missing(&self) -> usize {
        self.rows.len() - self.filled
    }
}

/// `out[t] = Σ_k row(t, k)`, summed in ascending `k`.
pub fn gather_accumulate(responses: &Responses) -> Result<Matrix> {
    if !responses.is_complete() {
        return Err(Error::protocol(format!(
            "{} of {} expert rows missing",
            responses.missing(),
            responses.rows.len()
        )));
    }
    let d = responses.hidden_dim;
    let mut out = Matrix::zeros(responses.num_tokens, d);
    for t in 0..responses.num_tokens {
        let acc = out.row_mut(t);
        for k in 0..responses.top_k {
            let row = responses.rows[t * responses.top_k + k].as_ref().unwrap();
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    Ok(out)
}

/// Shared fate of a static expert-parallel group. Any member failure stalls
/// the whole group for the restart penalty and bumps the epoch; work started
/// in an older epoch must be redone.
pub struct GroupGate {
    penalty: Duration,
    state: Mutex<GateState>,
    cv: Condvar,
}

struct GateState {
    epoch: u64,
    stalled_until: Option<Instant>,
}

impl GroupGate {
    pub fn new(penalty: Duration) -> Arc<Self> {
        Arc::new(GroupGate {
            penalty,
            state: Mutex::new(GateState {
                epoch: 0,
                stalled_until: None,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn penalty(&self) -> Duration {
        self.penalty
    }

    pub fn epoch(&self) -> u64 {
        self.state.lock().epoch
    }

    pub fn is_stalled(&self) -> bool {
        self.state
            .lock()
            .stalled_until
            .is_some_and(|t| Instant::now() < t)
    }

    /// Starts a restart unless one is already running. Returns the instant
    /// the group is back.
    pub fn fail(&self) -> Instant {
        let mut s = self.state.lock();
        let now = Instant::now();
        match s.stalled_until {
            Some(t) if now < t => t,
            _ => {
                s.epoch += 1;
                let until = now + self.penalty;
                s.stalled_until = Some(until);
                until
            }
        }
    }

    /// Blocks until the group is up and returns the current epoch.
    pub fn wait_ready(&self) -> u64 {
        let mut s = self.state.lock();
        loop {
            match s.stalled_until {
                Some(t) if Instant::now() < t => {
                    self.cv.wait_until(&mut s, t);
                }
                _ => return s.epoch,
            }
        }
    }
}

#[derive(Clone)]
pub enum FailurePolicy {
    /// Re-send the failed rows to surviving replicas.
    Failover,
    /// Static group: any failure restarts the group and the request.
    AbortGroup(Arc<GroupGate>),
}

#[derive(Clone)]
pub struct ClientConfig {
    pub client_id: ClientId,
    pub timeout: Duration,
    /// Fraction of tokens in micro-batch A.
    pub micro_batch_split: f64,
    pub poll_interval: Duration,
    /// Simulated cost of the dense block per micro-batch and layer.
    pub local_compute: Duration,
    pub heartbeat_period: Duration,
    pub exec: ExecPolicy,
    pub failure_policy: FailurePolicy,
}

impl ClientConfig {
    pub fn new(client_id: ClientId) -> Self {
        ClientConfig {
            client_id,
            timeout: Duration::from_millis(250),
            micro_batch_split: 0.5,
            poll_interval: Duration::from_micros(50),
            local_compute: Duration::ZERO,
            heartbeat_period: Duration::from_millis(100),
            exec: ExecPolicy::default(),
            failure_policy: FailurePolicy::Failover,
        }
    }
}

#[derive(Debug, Default)]
pub struct ClientMetrics {
    pub requests: AtomicU64,
    pub sub_requests: AtomicU64,
    pub failovers: AtomicU64,
    pub failovers_by_monitor: AtomicU64,
    pub failovers_by_timeout: AtomicU64,
    pub failovers_by_transport: AtomicU64,
    pub resubmitted_rows: AtomicU64,
    pub deferred_submits: AtomicU64,
    /// Sub-requests sent to a server the mask marked dead. Must stay zero.
    pub sends_to_dead: AtomicU64,
    pub group_restarts: AtomicU64,
    activations: Mutex<BTreeMap<ExpertId, u64>>,
    rows_sent: Mutex<BTreeMap<ServerId, u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientMetricsSnapshot {
    pub requests: u64,
    pub sub_requests: u64,
    pub failovers: u64,
    pub failovers_by_monitor: u64,
    pub failovers_by_timeout: u64,
    pub failovers_by_transport: u64,
    pub resubmitted_rows: u64,
    pub deferred_submits: u64,
    pub sends_to_dead: u64,
    pub group_restarts: u64,
    pub activations: BTreeMap<ExpertId, u64>,
    pub rows_sent: BTreeMap<ServerId, u64>,
}

impl ClientMetrics {
    pub fn snapshot(&self) -> ClientMetricsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ClientMetricsSnapshot {
            requests: g(&self.requests),
            sub_requests: g(&self.sub_requests),
            failovers: g(&self.failovers),
            failovers_by_monitor: g(&self.failovers_by_monitor),
            failovers_by_timeout: g(&self.failovers_by_timeout),
            failovers_by_transport: g(&self.failovers_by_transport),
            resubmitted_rows: g(&self.resubmitted_rows),
            deferred_submits: g(&self.deferred_submits),
            sends_to_dead: g(&self.sends_to_dead),
            group_restarts: g(&self.group_restarts),
            activations: self.activations.lock().clone(),
            rows_sent: self.rows_sent.lock().clone(),
        }
    }

    /// Takes and clears the activation counts.
    pub fn take_activations(&self) -> BTreeMap<ExpertId, u64> {
        std::mem::take(&mut *self.activations.lock())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FailCause {
    Monitor,
    Timeout,
    Transport,
}

struct ServerLink {
    conn: Box<dyn Connection>,
    slots: Vec<ClientSlot>,
}

struct Pending {
    sub: SubRequest,
    slot: usize,
    deadline: Instant,
    write: Option<Completion>,
}

/// Remote work of one layer for one micro-batch.
pub struct InFlight {
    layer: usize,
    hidden: Matrix,
    responses: Responses,
    pending: Vec<Pending>,
    deferred: Vec<SubRequest>,
    hops: Vec<u32>,
}

impl InFlight {
    pub fn is_done(&self) -> bool {
        self.responses.is_complete()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }
}

pub struct AttentionClient {
    config: ClientConfig,
    weights: Arc<ModelWeights>,
    fabric: Arc<dyn Fabric>,
    placement: Arc<PlacementTable>,
    mask: LivenessMask,
    links: BTreeMap<ServerId, ServerLink>,
    subscription: Option<Subscription>,
    next_seq: u64,
    next_request: u64,
    epoch: u64,
    metrics: Arc<ClientMetrics>,
    heartbeat: Option<(Arc<AtomicBool>, JoinHandle<()>)>,
    kill_switch: Option<Arc<AtomicBool>>,
}

impl AttentionClient {
    pub fn new(
        config: ClientConfig,
        weights: Arc<ModelWeights>,
        fabric: Arc<dyn Fabric>,
        placement: Arc<PlacementTable>,
    ) -> Result<Self> {
        placement.validate()?;
        if placement.num_experts() != weights.spec.num_experts {
            return Err(Error::Config(format!(
                "placement covers {} experts, model has {}",
                placement.num_experts(),
                weights.spec.num_experts
            )));
        }
        let epoch = match &config.failure_policy {
            FailurePolicy::AbortGroup(g) => g.epoch(),
            FailurePolicy::Failover => 0,
        };
        Ok(AttentionClient {
            config,
            weights,
            fabric,
            placement,
            mask: LivenessMask::new(),
            links: BTreeMap::new(),
            subscription: None,
            next_seq: 1,
            next_request: 0,
            epoch,
            metrics: Arc::new(ClientMetrics::default()),
            heartbeat: None,
            kill_switch: None,
        })
    }

    /// Registers with the monitor, subscribes, and starts heartbeats.
    /// A dead monitor only costs the early-notice path.
    pub fn attach_monitor(&mut self, control: Arc<dyn ControlPlane>) {
        let me = WorkerId::client(self.config.client_id);
        if let Err(e) = control.register(me) {
            log::warn!("{}: monitor registration failed: {e}", self.id());
        }
        self.subscription = control.subscribe().ok();
        let stop = Arc::new(AtomicBool::new(false));
        let t = spawn_heartbeat(control, me, self.config.heartbeat_period, stop.clone());
        self.heartbeat = Some((stop, t));
    }

    pub fn id(&self) -> ClientId {
        self.config.client_id
    }

    pub fn metrics(&self) -> Arc<ClientMetrics> {
        self.metrics.clone()
    }

    pub fn mask(&self) -> &LivenessMask {
        &self.mask
    }

    pub fn placement(&self) -> &Arc<PlacementTable> {
        &self.placement
    }

    /// Adopts `table` if it is newer than the current snapshot.
    pub fn set_placement(&mut self, table: Arc<PlacementTable>) {
        if table.version > self.placement.version {
            self.placement = table;
        }
    }

    /// Stops heartbeats and drops connections without resetting slots, as a
    /// crashed client would.
    pub fn crash(&mut self) {
        self.stop_heartbeat();
        self.links.clear();
    }

    /// Once `flag` is set the client crashes at its next step and every call
    /// fails with [`Error::Shutdown`].
    pub fn set_kill_switch(&mut self, flag: Arc<AtomicBool>) {
        self.kill_switch = Some(flag);
    }

    fn check_killed(&mut self) -> Result<()> {
        if self
            .kill_switch
            .as_ref()
            .is_some_and(|k| k.load(Ordering::Acquire))
        {
            self.crash();
            return Err(Error::Shutdown);
        }
        Ok(())
    }

    fn stop_heartbeat(&mut self) {
        if let Some((stop, t)) = self.heartbeat.take() {
            stop.store(true, Ordering::Release);
            let _ = t.join();
        }
    }

    fn drop_link(&mut self, server: ServerId) {
        if let Some(mut link) = self.links.remove(&server) {
            link.conn.close();
        }
    }

    fn mark_dead(&mut self, server: ServerId) {
        if self.mask.mark_dead(server) {
            log::info!("{}: marking {server} dead", self.id());
        }
        self.drop_link(server);
    }

    /// Applies queued monitor events to the mask and placement.
    fn process_events(&mut self) {
        let Some(sub) = self.subscription.as_mut() else {
            return;
        };
        let events = match sub.drain() {
            Ok(evs) => evs,
            Err(_) => {
                log::warn!("{}: monitor stream lost, relying on timeouts", self.id());
                self.subscription = None;
                return;
            }
        };
        for ev in events {
            match ev.body {
                EventBody::WorkerOffline(WorkerId::Server(s)) => self.mark_dead(s),
                EventBody::WorkerOnline(WorkerId::Server(s)) => {
                    if !self.mask.is_alive(s) {
                        self.drop_link(s);
                        self.mask.mark_alive(s);
                        log::info!("{}: {s} is back", self.id());
                    }
                }
                EventBody::Placement(table) => self.set_placement(Arc::new(table)),
                EventBody::WorkerOnline(_) | EventBody::WorkerOffline(_) => {}
            }
        }
    }

    fn check_group(&self) -> Result<()> {
        match &self.config.failure_policy {
            FailurePolicy::AbortGroup(g) if g.epoch() != self.epoch || g.is_stalled() => {
                Err(Error::GroupRestart)
            }
            _ => Ok(()),
        }
    }

    fn link(&mut self, server: ServerId) -> Result<&mut ServerLink> {
        if !self.links.contains_key(&server) {
            let conn = self.fabric.establish(self.config.client_id, server)?;
            let slots = conn
                .remote_regions()
                .iter()
                .map(|r| ClientSlot::new(*r))
                .collect::<Vec<_>>();
            if slots.is_empty() {
                return Err(Error::protocol(format!("{server} offered no slots")));
            }
            self.links.insert(server, ServerLink { conn, slots });
        }
        Ok(self.links.get_mut(&server).unwrap())
    }

    /// Handles a failed sub-request: restart the group, or mark the server
    /// dead and send the rows elsewhere.
    fn fail_over(&mut self, f: &mut InFlight, sub: SubRequest, cause: FailCause) -> Result<()> {
        if let FailurePolicy::AbortGroup(g) = &self.config.failure_policy {
            g.fail();
            return Err(Error::GroupRestart);
        }
        let server = sub.server;
        self.mark_dead(server);
        let m = &self.metrics;
        m.failovers.fetch_add(1, Ordering::Relaxed);
        m.resubmitted_rows
            .fetch_add(sub.rows.len() as u64, Ordering::Relaxed);
        match cause {
            FailCause::Monitor => &m.failovers_by_monitor,
            FailCause::Timeout => &m.failovers_by_timeout,
            FailCause::Transport => &m.failovers_by_transport,
        }
        .fetch_add(1, Ordering::Relaxed);
        log::debug!(
            "{}: failing over {} rows from {server} ({cause:?})",
            self.id(),
            sub.rows.len()
        );
        let k = self.weights.spec.top_k;
        for (row, &(t, kk)) in sub.rows.iter().zip(&sub.origin) {
            let hops = &mut f.hops[t * k + kk];
            *hops += 1;
            let replicas = self.placement.replicas_of(row.expert_id).len() as u32;
            if *hops >= replicas.max(1) {
                return Err(Error::ExpertUnavailable {
                    expert: row.expert_id,
                });
            }
        }
        self.route_rows(f, sub.rows.into_iter().zip(sub.origin))
    }

    fn route_rows(
        &mut self,
        f: &mut InFlight,
        rows: impl IntoIterator<Item = (RequestRow, (usize, usize))>,
    ) -> Result<()> {
        let subs = group_rows(rows, &self.placement, &self.mask)?;
        for sub in subs.into_values() {
            self.submit(f, sub)?;
        }
        Ok(())
    }

    fn submit(&mut self, f: &mut InFlight, sub: SubRequest) -> Result<()> {
        let server = sub.server;
        if !self.mask.is_alive(server) {
            self.metrics.sends_to_dead.fetch_add(1, Ordering::Relaxed);
        }
        let link = match self.link(server) {
            Ok(l) => l,
            Err(e) if e.is_retriable() => return self.fail_over(f, sub, FailCause::Transport),
            Err(e) => return Err(e),
        };
        let n_slots = link.slots.len() as u64;
        let Some(slot) = link
            .slots
            .iter()
            .position(|s| s.shadow == SlotState::Empty)
        else {
            self.metrics.deferred_submits.fetch_add(1, Ordering::Relaxed);
            f.deferred.push(sub);
            return Ok(());
        };
        let mut seq = self.next_seq;
        while seq % n_slots != slot as u64 {
            seq += 1;
        }
        self.next_seq = seq + 1;
        let header = SlotHeader::request(
            f.layer as u32,
            sub.rows.len(),
            self.weights.spec.hidden_dim,
            seq,
        );
        let link = self.links.get_mut(&server).expect("link established above");
        match client_submit(link.conn.as_mut(), &mut link.slots[slot], &header, &sub.rows) {
            Ok(write) => {
                self.metrics.sub_requests.fetch_add(1, Ordering::Relaxed);
                *self.metrics.rows_sent.lock().entry(server).or_default() +=
                    sub.rows.len() as u64;
                f.pending.push(Pending {
                    sub,
                    slot,
                    deadline: Instant::now() + self.config.timeout,
                    write: Some(write),
                });
                Ok(())
            }
            Err(e) if e.is_retriable() => self.fail_over(f, sub, FailCause::Transport),
            Err(e) => Err(e),
        }
    }

    /// Polls every pending sub-request once and retries deferred ones.
    fn progress(&mut self, f: &mut InFlight) -> Result<()> {
        for sub in std::mem::take(&mut f.deferred) {
            if self.mask.is_alive(sub.server) {
                self.submit(f, sub)?;
            } else {
                self.route_rows(f, sub.rows.into_iter().zip(sub.origin))?;
            }
        }
        let mut i = 0;
        while i < f.pending.len() {
            let server = f.pending[i].sub.server;
            if !self.mask.is_alive(server) {
                let p = f.pending.swap_remove(i);
                self.fail_over(f, p.sub, FailCause::Monitor)?;
                continue;
            }
            let p = &mut f.pending[i];
            if let Some(w) = p.write.as_mut() {
                if w.is_complete() {
                    let w = p.write.take().unwrap();
                    if let Err(e) = w.wait() {
                        let p = f.pending.swap_remove(i);
                        if e.is_retriable() {
                            self.fail_over(f, p.sub, FailCause::Transport)?;
                            continue;
                        }
                        return Err(e);
                    }
                }
            }
            let slot = f.pending[i].slot;
            let outcome = match self.links.get_mut(&server) {
                Some(link) => client_poll(link.conn.as_mut(), &mut link.slots[slot]),
                None => Err(Error::TransportFailure(server)),
            };
            match outcome {
                Ok(PollOutcome::Ready { header, outputs }) => {
                    let p = f.pending.swap_remove(i);
                    if header.num_rows as usize != p.sub.rows.len() {
                        return Err(Error::protocol(format!(
                            "{server} answered {} of {} rows",
                            header.num_rows,
                            p.sub.rows.len()
                        )));
                    }
                    f.responses.insert(&p.sub.origin, &outputs)?;
                }
                Ok(PollOutcome::Pending) => {
                    if Instant::now() >= f.pending[i].deadline {
                        let p = f.pending.swap_remove(i);
                        self.fail_over(f, p.sub, FailCause::Timeout)?;
                    } else {
                        i += 1;
                    }
                }
                Ok(PollOutcome::Released) => {
                    // The server dropped our slots; it is alive, so
                    // reconnect and resend to it.
                    let p = f.pending.swap_remove(i);
                    self.drop_link(server);
                    self.submit(f, p.sub)?;
                }
                Err(e) if e.is_retriable() => {
                    let p = f.pending.swap_remove(i);
                    self.fail_over(f, p.sub, FailCause::Transport)?;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Drives every flight until `flights[target]` is complete.
    fn drive(&mut self, flights: &mut [&mut InFlight], target: usize) -> Result<()> {
        loop {
            self.check_killed()?;
            self.check_group()?;
            self.process_events();
            for f in flights.iter_mut() {
                self.progress(f)?;
            }
            if flights[target].is_done() {
                return Ok(());
            }
            std::thread::sleep(self.config.poll_interval);
        }
    }

    /// Dense stub, routing and dispatch of one layer for one micro-batch.
    pub fn stage(&mut self, layer: usize, mut hidden: Matrix) -> Result<InFlight> {
        self.check_killed()?;
        self.check_group()?;
        self.process_events();
        let spec = self.weights.spec;
        let started = Instant::now();
        dense_stub(&mut hidden);
        let lw = self.weights.layer(layer)?;
        let logits = gate_logits(&hidden, &lw.gate, &self.weights.gate_bias)?;
        let routing = route_with(self.config.exec, &logits, spec.top_k)?;
        {
            let mut acts = self.metrics.activations.lock();
            for &e in &routing.expert_ids {
                *acts.entry(e).or_default() += 1;
            }
        }
        let plan = build_dispatch(&hidden, &routing, &self.placement, &self.mask)?;
        if let Some(rest) = self.config.local_compute.checked_sub(started.elapsed()) {
            std::thread::sleep(rest);
        }
        let mut f = InFlight {
            layer,
            responses: Responses::for_plan(&plan, spec.hidden_dim),
            hops: vec![0; plan.num_tokens * plan.top_k],
            hidden,
            pending: Vec::new(),
            deferred: Vec::new(),
        };
        for sub in plan.per_server.into_values() {
            self.submit(&mut f, sub)?;
        }
        Ok(f)
    }

    /// Waits for `f` (progressing `others` meanwhile) and applies the
    /// residual add.
    pub fn finish(&mut self, mut f: InFlight, others: &mut [&mut InFlight]) -> Result<Matrix> {
        let mut flights: Vec<&mut InFlight> = Vec::with_capacity(1 + others.len());
        flights.push(&mut f);
        for o in others.iter_mut() {
            flights.push(o);
        }
        self.drive(&mut flights, 0)?;
        drop(flights);
        let moe = gather_accumulate(&f.responses)?;
        let mut h = f.hidden;
        for (a, b) in h.as_mut_slice().iter_mut().zip(moe.as_slice()) {
            *a += b;
        }
        Ok(h)
    }

    fn check_tokens(&self, tokens: &Matrix) -> Result<()> {
        if tokens.rows() > 0 && tokens.cols() != self.weights.spec.hidden_dim {
            return Err(Error::rejected(format!(
                "tokens have width {}, model expects {}",
                tokens.cols(),
                self.weights.spec.hidden_dim
            )));
        }
        Ok(())
    }

    fn run_request<F>(&mut self, tokens: &Matrix, body: F) -> Result<Matrix>
    where
        F: Fn(&mut Self, &Matrix) -> Result<Matrix>,
    {
        self.check_tokens(tokens)?;
        let request = self.next_request;
        self.next_request += 1;
        self.metrics.requests.fetch_add(1, Ordering::Relaxed);
        loop {
            match body(self, tokens) {
                Ok(out) => return Ok(out),
                Err(Error::GroupRestart) => {
                    let FailurePolicy::AbortGroup(gate) = self.config.failure_policy.clone() else {
                        unreachable!("only static groups restart")
                    };
                    self.metrics.group_restarts.fetch_add(1, Ordering::Relaxed);
                    self.links.clear();
                    self.epoch = gate.wait_ready();
                    self.mask = LivenessMask::new();
                    log::debug!("{}: group back, retrying request {request}", self.id());
                }
                Err(Error::Shutdown) => return Err(Error::Shutdown),
                Err(e) => {
                    return Err(Error::FatalRequest {
                        request,
                        source: Box::new(e),
                    })
                }
            }
        }
    }

    /// Full forward pass, one layer at a time.
    pub fn forward(&mut self, tokens: &Matrix) -> Result<Matrix> {
        self.run_request(tokens, |c, tokens| c.forward_inner(tokens))
    }

    fn forward_inner(&mut self, tokens: &Matrix) -> Result<Matrix> {
        let mut h = tokens.clone();
        if h.rows() == 0 {
            return Ok(h);
        }
        for layer in 0..self.weights.spec.num_layers {
            let f = self.stage(layer, h)?;
            h = self.finish(f, &mut [])?;
        }
        Ok(h)
    }

    /// Forward pass over two micro-batches so one's remote MoE latency hides
    /// behind the other's local compute. Results equal [`forward`] exactly.
    ///
    /// [`forward`]: AttentionClient::forward
    pub fn pipelined_forward(&mut self, tokens: &Matrix) -> Result<Matrix> {
        self.run_request(tokens, |c, tokens| c.pipelined_inner(tokens))
    }

    /// Micro-batch split point for `n` tokens.
    pub fn split_point(&self, n: usize) -> usize {
        ((n as f64 * self.config.micro_batch_split).ceil() as usize).min(n)
    }

    fn pipelined_inner(&mut self, tokens: &Matrix) -> Result<Matrix> {
        let at = self.split_point(tokens.rows());
        if at == 0 || at == tokens.rows() {
            return self.forward_inner(tokens);
        }
        let (a, b) = tokens.split_rows(at);
        let layers = self.weights.spec.num_layers;
        let mut fa = self.stage(0, a)?;
        let mut fb = self.stage(0, b)?;
        for layer in 0..layers {
            let ha = self.finish(fa, &mut [&mut fb])?;
            if layer + 1 == layers {
                let hb = self.finish(fb, &mut [])?;
                return ha.vstack(&hb);
            }
            fa = self.stage(layer + 1, ha)?;
            let hb = self.finish(fb, &mut [&mut fa])?;
            fb = self.stage(layer + 1, hb)?;
        }
        unreachable!("loop returns on the last layer")
    }
}

impl Drop for AttentionClient {
    fn drop(&mut self) {
        self.stop_heartbeat();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::{build_placement, PlacementStrategy};

    fn routing(experts: Vec<ExpertId>, scores: Vec<f32>, top_k: usize) -> RoutingDecision {
        RoutingDecision {
            top_k,
            expert_ids: experts,
            scores,
        }
    }

    #[test]
    fn single_server_gets_everything() {
        let table = build_placement(4, &[ServerId(0)], 1, PlacementStrategy::RoundRobin).unwrap();
        let h = Matrix::zeros(3, 2);
        let r = routing(vec![0, 1, 3], vec![1.0; 3], 1);
        let plan = build_dispatch(&h, &r, &table, &LivenessMask::new()).unwrap();
        assert_eq!(plan.row_counts(), BTreeMap::from([(ServerId(0), 3)]));
    }

    #[test]
    fn two_experts_same_server_share_tag() {
        let table = build_placement(4, &[ServerId(0)], 1, PlacementStrategy::RoundRobin).unwrap();
        let h = Matrix::zeros(1, 2);
        let r = routing(vec![1, 2], vec![0.5, 0.5], 2);
        let plan = build_dispatch(&h, &r, &table, &LivenessMask::new()).unwrap();
        let sub = &plan.per_server[&ServerId(0)];
        assert_eq!(sub.rows.len(), 2);
        assert!(sub.rows.iter().all(|r| r.token_tag == 0));
        assert_eq!(sub.origin, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn disjoint_halves_partition() {
        // Experts 0,1 on server 0; 2,3 on server 1.
        let table =
            build_placement(4, &[ServerId(0), ServerId(1)], 1, PlacementStrategy::ContiguousBlocks)
                .unwrap();
        let h = Matrix::zeros(4, 2);
        let r = routing(
            vec![0, 1, 0, 2, 2, 3, 1, 3],
            vec![0.5; 8],
            2,
        );
        let plan = build_dispatch(&h, &r, &table, &LivenessMask::new()).unwrap();
        // Hand count: low experts {0,1,0,1} = 4, high {2,2,3,3} = 4.
        assert_eq!(
            plan.row_counts(),
            BTreeMap::from([(ServerId(0), 4), (ServerId(1), 4)])
        );
        let covered: usize = plan.per_server.values().map(|s| s.origin.len()).sum();
        assert_eq!(covered, 8);
    }

    #[test]
    fn no_live_replica_is_unavailable() {
        let table = build_placement(2, &[ServerId(0)], 1, PlacementStrategy::RoundRobin).unwrap();
        let mut mask = LivenessMask::new();
        mask.mark_dead(ServerId(0));
        let r = routing(vec![1], vec![1.0], 1);
        assert!(matches!(
            build_dispatch(&Matrix::zeros(1, 2), &r, &table, &mask),
            Err(Error::ExpertUnavailable { expert: 1 })
        ));
    }

    #[test]
    fn gather_sums_in_k_order() {
        let mut resp = Responses::new(2, 2, 1);
        resp.insert(&[(1, 1), (0, 0)], &[3.0, 1.0]).unwrap();
        assert!(gather_accumulate(&resp).is_err());
        resp.insert(&[(0, 1), (1, 0)], &[2.0, 4.0]).unwrap();
        let out = gather_accumulate(&resp).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_scores_give_zero() {
        let mut resp = Responses::new(2, 1, 2);
        resp.insert(&[(0, 0), (1, 0)], &[0.0; 4]).unwrap();
        assert_eq!(gather_accumulate(&resp).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn gate_stalls_once_and_recovers() {
        let gate = GroupGate::new(Duration::from_millis(20));
        let until = gate.fail();
        assert_eq!(gate.fail(), until);
        assert_eq!(gate.epoch(), 1);
        assert!(gate.is_stalled());
        let start = Instant::now();
        assert_eq!(gate.wait_ready(), 1);
        assert!(start.elapsed() >= Duration::from_millis(15));
        assert!(!gate.is_stalled());
    }
}
