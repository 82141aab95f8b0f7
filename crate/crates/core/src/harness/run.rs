//! Stands up a cluster for a scenario, injects its events and collects
//! metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use crate::client::{AttentionClient, ClientConfig, ClientMetrics, FailurePolicy, GroupGate};
use crate::model::{full_forward_oracle, init_weights, Matrix, ModelWeights};
use crate::monitor::remote::{MonitorEndpoint, RemoteMonitor};
use crate::monitor::{ControlPlane, Monitor, MonitorHandle};
use crate::placement::{
    build_placement, rebalance, PlacementStrategy, PlacementTable, RebalancePolicy,
};
use crate::server::{ExpertServer, ServerConfig, ServiceTime};
use crate::transport::inproc::InProcFabric;
use crate::transport::tcp::TcpFabric;
use crate::transport::Fabric;
use crate::{ClientId, Error, ExpertId, Result, ServerId};

use super::metrics::{RequestRecord, RunMetrics};
use super::scenario::{Backend, EventKind, EventSpec, Mode, Scenario};
use super::workload::{gen_workload, Request, Workload};

fn us(v: u64) -> Duration {
    Duration::from_micros(v)
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

/// Model weights (with the workload's gate bias) and the workload itself.
pub fn build_inputs(scenario: &Scenario) -> Result<(Arc<ModelWeights>, Workload)> {
    let workload = gen_workload(scenario);
    let weights = init_weights(&scenario.model_spec())?.with_gate_bias(workload.gate_bias.clone())?;
    Ok((Arc::new(weights), workload))
}

/// Initial placement. Monolithic mode is a static group: contiguous equal
/// shards, one replica each, which needs the server count to divide the
/// expert count.
pub fn initial_placement(scenario: &Scenario) -> Result<PlacementTable> {
    let experts = scenario.model.experts;
    let servers = scenario.topology.servers;
    let ids: Vec<ServerId> = (0..servers as u32).map(ServerId).collect();
    match scenario.run.mode {
        Mode::Eaas => build_placement(
            experts,
            &ids,
            scenario.topology.replication,
            scenario.strategy()?,
        ),
        Mode::Monolithic => {
            if !experts.is_multiple_of(servers) {
                return Err(Error::Unsupported(format!(
                    "a static group of {servers} cannot shard {experts} experts evenly"
                )));
            }
            build_placement(experts, &ids, 1, PlacementStrategy::ContiguousBlocks)
        }
    }
}

/// Rejects schedules that take down every replica of some expert.
fn check_resolvable(scenario: &Scenario, table: &PlacementTable) -> Result<()> {
    if scenario.run.mode == Mode::Monolithic {
        return Ok(());
    }
    let mut down = BTreeSet::new();
    for ev in sorted_events(scenario) {
        if matches!(ev.kind, EventKind::KillServer | EventKind::HangServer) {
            down.insert(ServerId(ev.target));
            for e in 0..table.num_experts() as ExpertId {
                if table.replicas_of(e).iter().all(|s| down.contains(s)) {
                    return Err(Error::Scenario(format!(
                        "{:?} of server {} at {} ms leaves expert {e} without a live replica",
                        ev.kind, ev.target, ev.at_ms
                    )));
                }
            }
        }
    }
    Ok(())
}

fn sorted_events(scenario: &Scenario) -> Vec<EventSpec> {
    let mut evs = scenario.events.clone();
    evs.sort_by_key(|e| e.at_ms);
    evs
}

enum Net {
    Inproc(Arc<InProcFabric>),
    Tcp(Arc<TcpFabric>),
}

impl Net {
    fn fabric(&self) -> Arc<dyn Fabric> {
        match self {
            Net::Inproc(f) => f.clone(),
            Net::Tcp(f) => f.clone(),
        }
    }

    fn attach(&self, server: &ExpertServer) {
        match self {
            Net::Inproc(f) => f.add_node(server.node()),
            Net::Tcp(f) => f.register(server.id(), server.tcp_addr().expect("tcp server has an address")),
        }
    }
}

struct Cluster {
    scenario: Scenario,
    weights: Arc<ModelWeights>,
    net: Net,
    monitor: Mutex<Option<Monitor>>,
    endpoint: Mutex<Option<MonitorEndpoint>>,
    publisher: Option<MonitorHandle>,
    /// What workers talk to: the monitor directly, or over TCP.
    control: Option<Arc<dyn ControlPlane>>,
    servers: Mutex<BTreeMap<ServerId, ExpertServer>>,
    retired: Mutex<Vec<ExpertServer>>,
    down: Mutex<BTreeSet<ServerId>>,
    table: Mutex<Arc<PlacementTable>>,
    gate: Option<Arc<GroupGate>>,
    kill_switches: Vec<Arc<AtomicBool>>,
    client_metrics: Mutex<BTreeMap<usize, Arc<ClientMetrics>>>,
}

impl Cluster {
    fn start(scenario: &Scenario, weights: Arc<ModelWeights>, table: PlacementTable) -> Result<Cluster> {
        let tcp = scenario.topology.backend == Backend::Tcp;
        let (monitor, endpoint, publisher, control) = if scenario.monitor.enabled {
            let m = Monitor::start(scenario.monitor_config());
            let handle = m.handle();
            let (endpoint, control): (Option<MonitorEndpoint>, Arc<dyn ControlPlane>) = if tcp {
                let ep = MonitorEndpoint::spawn(handle.clone(), "127.0.0.1:0")?;
                let remote = Arc::new(RemoteMonitor::new(ep.addr()));
                (Some(ep), remote)
            } else {
                (None, Arc::new(handle.clone()))
            };
            (Some(m), endpoint, Some(handle), Some(control))
        } else {
            (None, None, None, None)
        };
        let net = if tcp {
            let op_timeout = ms(scenario.client.timeout_ms).max(ms(50));
            Net::Tcp(TcpFabric::with_timeouts(Duration::from_secs(1), op_timeout))
        } else {
            Net::Inproc(InProcFabric::new())
        };
        let gate = (scenario.run.mode == Mode::Monolithic)
            .then(|| GroupGate::new(ms(scenario.run.restart_penalty_ms)));
        let cluster = Cluster {
            scenario: scenario.clone(),
            weights,
            net,
            monitor: Mutex::new(monitor),
            endpoint: Mutex::new(endpoint),
            publisher,
            control,
            servers: Mutex::new(BTreeMap::new()),
            retired: Mutex::new(Vec::new()),
            down: Mutex::new(BTreeSet::new()),
            table: Mutex::new(Arc::new(table.clone())),
            gate,
            kill_switches: (0..scenario.topology.clients)
                .map(|_| Arc::new(AtomicBool::new(false)))
                .collect(),
            client_metrics: Mutex::new(BTreeMap::new()),
        };
        for id in table.servers() {
            cluster.spawn_server(id, table.hosted_by(id).to_vec())?;
        }
        Ok(cluster)
    }

    fn server_config(&self, id: ServerId, hosted: Vec<ExpertId>) -> ServerConfig {
        let s = &self.scenario.server;
        let mut cfg = ServerConfig::new(id, hosted);
        if self.scenario.topology.backend == Backend::Tcp {
            cfg.listen_addr = Some("127.0.0.1:0".into());
        }
        cfg.min_rows = s.min_rows;
        cfg.max_wait = us(s.max_wait_us);
        cfg.heartbeat_period = ms(s.heartbeat_period_ms);
        cfg.max_rows_per_slot = s.max_rows_per_slot;
        cfg.idle_sleep = us(s.idle_sleep_us);
        cfg.service_time = ServiceTime {
            per_batch: us(s.service_us_per_batch),
            per_row: us(s.service_us_per_row),
        };
        cfg
    }

    /// Starts a server, makes it reachable and returns the one it replaced.
    fn spawn_server(&self, id: ServerId, hosted: Vec<ExpertId>) -> Result<Option<ExpertServer>> {
        let server = ExpertServer::start(
            self.server_config(id, hosted),
            self.weights.clone(),
            self.control.clone(),
        )?;
        self.net.attach(&server);
        Ok(self.servers.lock().insert(id, server))
    }

    fn client_config(&self, idx: usize) -> ClientConfig {
        let c = &self.scenario.client;
        let mut cfg = ClientConfig::new(ClientId(idx as u32));
        cfg.timeout = ms(c.timeout_ms);
        cfg.micro_batch_split = c.micro_batch_split;
        cfg.poll_interval = us(c.poll_interval_us);
        cfg.local_compute = us(c.local_compute_us);
        cfg.heartbeat_period = ms(self.scenario.monitor.heartbeat_period_ms);
        if let Some(g) = &self.gate {
            cfg.failure_policy = FailurePolicy::AbortGroup(g.clone());
        }
        cfg
    }

    fn publish(&self, table: PlacementTable) -> Result<()> {
        let publisher = self.publisher.as_ref().ok_or(Error::MonitorDown)?;
        publisher.publish_placement(table.clone())?;
        *self.table.lock() = Arc::new(table);
        Ok(())
    }

    /// A static group loses a member: the whole group stalls and the member
    /// is replaced by a fresh process with the same shard.
    fn restart_member(&self, id: ServerId) -> Result<()> {
        if let Some(g) = &self.gate {
            g.fail();
        }
        let hosted = self.table.lock().hosted_by(id).to_vec();
        if let Some(old) = self.spawn_server(id, hosted)? {
            self.retired.lock().push(old);
        }
        Ok(())
    }

    fn apply(&self, ev: &EventSpec) -> Result<String> {
        let target = ev.target;
        let monolithic = self.scenario.run.mode == Mode::Monolithic;
        let id = ServerId(target);
        match ev.kind {
            EventKind::KillServer => {
                if let Some(s) = self.servers.lock().get_mut(&id) {
                    s.kill();
                }
                if monolithic {
                    self.restart_member(id)?;
                } else {
                    self.down.lock().insert(id);
                }
                Ok(format!("killed {id}"))
            }
            EventKind::HangServer => {
                if let Some(s) = self.servers.lock().get(&id) {
                    s.hang();
                }
                if monolithic {
                    self.restart_member(id)?;
                } else {
                    self.down.lock().insert(id);
                }
                Ok(format!("hung {id}"))
            }
            EventKind::KillClient => {
                self.kill_switches[target as usize].store(true, Ordering::Release);
                Ok(format!("killed {}", ClientId(target)))
            }
            EventKind::AddServer => {
                self.spawn_server(id, Vec::new())?;
                let next = self.table.lock().with_server(id);
                self.publish(next)?;
                Ok(format!("added {id}"))
            }
            EventKind::Rebalance => {
                let mut counts: BTreeMap<ExpertId, u64> = BTreeMap::new();
                for m in self.client_metrics.lock().values() {
                    for (e, c) in m.take_activations() {
                        *counts.entry(e).or_default() += c;
                    }
                }
                let down = self.down.lock().clone();
                let loads: BTreeMap<ServerId, u64> = self
                    .servers
                    .lock()
                    .iter()
                    .filter(|(id, _)| !down.contains(id))
                    .map(|(&id, s)| (id, s.metrics().rows_processed))
                    .collect();
                let current = self.table.lock().clone();
                let next = rebalance(&counts, &current, &loads, RebalancePolicy::default());
                // Servers must hold the weights before clients may route there.
                for (id, s) in self.servers.lock().iter() {
                    s.core().host_experts(next.hosted_by(*id));
                }
                let changed = next.replicas != current.replicas;
                self.publish(next)?;
                Ok(format!(
                    "rebalanced ({})",
                    if changed { "placement changed" } else { "no change" }
                ))
            }
            EventKind::KillMonitor => {
                if let Some(mut m) = self.monitor.lock().take() {
                    m.kill();
                }
                self.endpoint.lock().take();
                Ok("killed monitor".into())
            }
        }
    }

    fn shutdown(&self) {
        for s in self.servers.lock().values_mut() {
            s.shutdown();
        }
        for s in self.retired.lock().iter_mut() {
            s.shutdown();
        }
        self.endpoint.lock().take();
        if let Some(mut m) = self.monitor.lock().take() {
            m.kill();
        }
    }
}

enum Report {
    Done(RequestRecord, Matrix),
    Failed { request: u64, error: String },
    ClientExit { at: Duration, killed: bool },
}

fn client_main(
    cluster: Arc<Cluster>,
    idx: usize,
    requests: Vec<Request>,
    origin: Instant,
    tx: Sender<Report>,
) {
    let kill = cluster.kill_switches[idx].clone();
    let exit = |killed: bool| {
        let _ = tx.send(Report::ClientExit {
            at: origin.elapsed(),
            killed,
        });
    };
    let table = cluster.table.lock().clone();
    let mut client = match AttentionClient::new(
        cluster.client_config(idx),
        cluster.weights.clone(),
        cluster.net.fabric(),
        table,
    ) {
        Ok(c) => c,
        Err(e) => {
            for r in &requests {
                let _ = tx.send(Report::Failed {
                    request: r.id,
                    error: e.to_string(),
                });
            }
            return exit(false);
        }
    };
    if let Some(c) = &cluster.control {
        client.attach_monitor(c.clone());
    }
    client.set_kill_switch(kill.clone());
    cluster.client_metrics.lock().insert(idx, client.metrics());
    let pipelined = cluster.scenario.client.pipelined;
    for (i, r) in requests.iter().enumerate() {
        while origin.elapsed() < r.arrival && !kill.load(Ordering::Acquire) {
            std::thread::sleep((r.arrival - origin.elapsed()).min(ms(5)));
        }
        let start = origin.elapsed();
        let out = if pipelined {
            client.pipelined_forward(&r.tokens)
        } else {
            client.forward(&r.tokens)
        };
        match out {
            Ok(out) => {
                let rec = RequestRecord {
                    request: r.id,
                    client: idx,
                    tokens: r.tokens.rows(),
                    arrival: r.arrival,
                    start,
                    end: origin.elapsed(),
                };
                let _ = tx.send(Report::Done(rec, out));
            }
            Err(Error::Shutdown) => {
                for r in &requests[i..] {
                    let _ = tx.send(Report::Failed {
                        request: r.id,
                        error: Error::Shutdown.to_string(),
                    });
                }
                return exit(true);
            }
            Err(e) => {
                log::warn!("{}: {e}", client.id());
                let _ = tx.send(Report::Failed {
                    request: r.id,
                    error: e.to_string(),
                });
            }
        }
    }
    exit(false)
}

fn spawn_injector(
    cluster: Arc<Cluster>,
    events: Vec<EventSpec>,
    origin: Instant,
    stop: Arc<AtomicBool>,
) -> JoinHandle<(Vec<String>, Vec<String>)> {
    std::thread::Builder::new()
        .name("injector".into())
        .spawn(move || {
            let (mut applied, mut errors) = (Vec::new(), Vec::new());
            for ev in events {
                while origin.elapsed() < ev.at() {
                    if stop.load(Ordering::Acquire) {
                        return (applied, errors);
                    }
                    std::thread::sleep((ev.at() - origin.elapsed()).min(ms(2)));
                }
                match cluster.apply(&ev) {
                    Ok(what) => {
                        log::info!("t={} ms: {what}", origin.elapsed().as_millis());
                        applied.push(format!("{} ms: {what}", ev.at_ms));
                    }
                    Err(e) => {
                        log::error!("event at {} ms failed: {e}", ev.at_ms);
                        errors.push(format!("event at {} ms: {e}", ev.at_ms));
                    }
                }
            }
            (applied, errors)
        })
        .expect("spawn injector")
}

/// Runs the scenario to completion (or its horizon) and returns metrics.
pub fn run(scenario: &Scenario) -> Result<RunMetrics> {
    scenario.validate()?;
    let (weights, workload) = build_inputs(scenario)?;
    let table = initial_placement(scenario)?;
    check_resolvable(scenario, &table)?;
    let cluster = Arc::new(Cluster::start(scenario, weights.clone(), table)?);

    let (tx, rx) = unbounded();
    let origin = Instant::now();
    let clients: Vec<JoinHandle<()>> = (0..scenario.topology.clients)
        .map(|idx| {
            let reqs: Vec<Request> = workload.for_client(idx).cloned().collect();
            let (c, tx) = (cluster.clone(), tx.clone());
            std::thread::Builder::new()
                .name(format!("client-{idx}"))
                .spawn(move || client_main(c, idx, reqs, origin, tx))
                .expect("spawn client")
        })
        .collect();
    drop(tx);
    let stop = Arc::new(AtomicBool::new(false));
    let injector = spawn_injector(cluster.clone(), sorted_events(scenario), origin, stop.clone());

    let mut metrics = collect(scenario, &cluster, &rx, origin);
    stop.store(true, Ordering::Release);
    for c in clients {
        let _ = c.join();
    }
    let (applied, errors) = injector.join().unwrap_or_default();
    metrics.events = applied;
    metrics.errors.extend(errors);

    metrics.scenario = scenario.name.clone();
    metrics.mode = Some(scenario.run.mode);
    metrics.servers = scenario.topology.servers;
    metrics.clients = scenario.topology.clients;
    metrics.submitted_requests = workload.requests.len();
    metrics.submitted_tokens = workload.total_tokens();
    metrics.window = scenario.window();
    metrics.first_fault = sorted_events(scenario)
        .iter()
        .find(|e| matches!(e.kind, EventKind::KillServer | EventKind::HangServer))
        .map(|e| e.at());
    metrics.compute_windows();
    gather_counters(&cluster, &mut metrics);
    cluster.shutdown();

    if scenario.run.verify {
        metrics.max_oracle_error = Some(oracle_error(&weights, &workload, &metrics.outputs)?);
    }
    Ok(metrics)
}

/// The single metrics collector: drains client reports until every client
/// has exited, aborting the run at the horizon.
fn collect(scenario: &Scenario, cluster: &Cluster, rx: &Receiver<Report>, origin: Instant) -> RunMetrics {
    let mut m = RunMetrics::default();
    let horizon = ms(scenario.run.horizon_ms);
    let mut exited = 0;
    let mut aborted = false;
    while exited < scenario.topology.clients {
        match rx.recv_timeout(ms(20)) {
            Ok(Report::Done(rec, out)) => {
                m.completed_requests += 1;
                m.completed_tokens += rec.tokens;
                m.outputs.insert(rec.request, out);
                m.records.push(rec);
            }
            Ok(Report::Failed { request, error }) => {
                m.failed_requests += 1;
                if error != Error::Shutdown.to_string() {
                    m.errors.push(format!("request {request}: {error}"));
                }
            }
            Ok(Report::ClientExit { at, killed, .. }) => {
                exited += 1;
                if !killed {
                    m.first_client_done = Some(m.first_client_done.map_or(at, |t: Duration| t.min(at)));
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if !aborted && origin.elapsed() > horizon {
            aborted = true;
            m.errors.push(format!("run exceeded its {} ms horizon", scenario.run.horizon_ms));
            for k in &cluster.kill_switches {
                k.store(true, Ordering::Release);
            }
        }
    }
    m.wall = m.records.iter().map(|r| r.end).max().unwrap_or_default();
    m.records.sort_by_key(|r| r.request);
    m
}

fn gather_counters(cluster: &Cluster, m: &mut RunMetrics) {
    let servers = cluster.servers.lock();
    let retired = cluster.retired.lock();
    for s in servers.values().chain(retired.iter()) {
        let snap = s.metrics();
        *m.per_server_rows.entry(s.id()).or_default() += snap.rows_processed;
        m.rows_processed += snap.rows_processed;
        m.rows_voided += snap.voided_rows;
        m.bad_crc_slots += snap.bad_crc_slots;
    }
    for c in cluster.client_metrics.lock().values() {
        let snap = c.snapshot();
        m.failovers += snap.failovers;
        m.failovers_by_monitor += snap.failovers_by_monitor;
        m.failovers_by_timeout += snap.failovers_by_timeout;
        m.failovers_by_transport += snap.failovers_by_transport;
        m.sends_to_dead += snap.sends_to_dead;
        m.group_restarts += snap.group_restarts;
        m.rows_resubmitted += snap.resubmitted_rows;
        m.rows_sent += snap.rows_sent.values().sum::<u64>();
    }
}

fn oracle_error(weights: &ModelWeights, workload: &Workload, outputs: &BTreeMap<u64, Matrix>) -> Result<f32> {
    let mut worst = 0.0f32;
    for r in &workload.requests {
        if let Some(out) = outputs.get(&r.id) {
            let expect = full_forward_oracle(weights, &r.tokens)?;
            worst = worst.max(out.max_abs_diff(&expect));
        }
    }
    Ok(worst)
}

/// Runs the scenario and compares every completed request with the oracle.
pub fn verify(scenario: &Scenario) -> Result<RunMetrics> {
    let mut s = scenario.clone();
    s.run.verify = true;
    run(&s)
}
