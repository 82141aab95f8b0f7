#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use eaas::protocol::{
    client_poll, client_submit, server_mark_offline, server_publish, server_read_request,
    server_reallocate, slot_len, valid_transition, verify_sealed, Actor, ClientSlot, PollOutcome,
    RequestRow, SlotHeader, SlotState,
};
use eaas::rng::Stream;
use eaas::server::{group_shrink, ragged_iter};
use eaas::transport::inproc::InProcFabric;
use eaas::transport::{
    Fabric, HandshakeHandler, Region, RegionDescriptor, ServerMemory, ServerNode,
};
use eaas::{ClientId, Result, ServerId};

pub fn fixture(name: &str) -> Vec<u8> {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name]
        .iter()
        .collect();
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every (entry, token) pair, by plain nested loops.
pub fn naive_pairs(counts: &[usize]) -> BTreeSet<(usize, usize)> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(e, &c)| (0..c).map(move |t| (e, t)))
        .collect()
}

/// Compares `ragged_iter` with the naive enumeration for one input: the lanes
/// must be pairwise disjoint and their union must be exactly the pair set.
pub fn ragged_matches(counts: &[usize], grid: usize) -> bool {
    let lanes = ragged_iter(counts, grid);
    if lanes.len() != grid {
        return false;
    }
    let mut seen = BTreeSet::new();
    for lane in &lanes {
        for &p in lane {
            if !seen.insert(p) {
                return false;
            }
        }
    }
    seen == naive_pairs(counts)
}

/// All count vectors of length 0..=max_len with entries 0..=max_count.
pub fn all_count_vectors(max_len: usize, max_count: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for v in &layer {
            for c in 0..=max_count {
                let mut w: Vec<usize> = v.clone();
                w.push(c);
                next.push(w);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Returns (cases checked, failing cases).
pub fn ragged_exhaustive(max_len: usize, max_count: usize, max_grid: usize) -> (usize, Vec<(Vec<usize>, usize)>) {
    let mut cases = 0;
    let mut failures = Vec::new();
    for counts in all_count_vectors(max_len, max_count) {
        for grid in 1..=max_grid {
            cases += 1;
            if !ragged_matches(&counts, grid) {
                failures.push((counts.clone(), grid));
            }
        }
    }
    (cases, failures)
}

/// Filter with stable order.
pub fn shrink_oracle(sizes: &[usize]) -> (Vec<(usize, usize)>, usize) {
    let kept: Vec<(usize, usize)> = sizes
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, s)| s > 0)
        .collect();
    let n = kept.len();
    (kept, n)
}

/// Returns (vectors checked, mismatches) over `n` random vectors plus the
/// all-zero and all-positive edges.
pub fn shrink_random(n: usize, seed: u64) -> (usize, usize) {
    let mut rng = Stream::new(seed, 0x5348, 0);
    let mut vectors: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = rng.below(65) as usize;
            (0..len)
                .map(|_| if rng.below(2) == 0 { 0 } else { rng.below(100) as usize })
                .collect()
        })
        .collect();
    vectors.push(vec![0; 17]);
    vectors.push((1..=17).collect());
    vectors.push(Vec::new());
    let bad = vectors
        .iter()
        .filter(|v| group_shrink(v) != shrink_oracle(v))
        .count();
    (vectors.len(), bad)
}

/// Handshake handler for one fixed slot region.
struct OneSlot {
    region: RegionDescriptor,
}

impl HandshakeHandler for OneSlot {
    fn accept(&self, _client: ClientId, _regions: &[RegionDescriptor]) -> Result<Vec<RegionDescriptor>> {
        Ok(vec![self.region])
    }
}

#[derive(Debug, Default)]
pub struct ScheduleReport {
    pub schedules: usize,
    pub steps: usize,
    /// Observed flag changes, by (from, to, actor).
    pub transitions: BTreeMap<(u8, u8, &'static str), u64>,
    pub invalid: Vec<String>,
    /// Flag observations of state 1 or 2 whose image failed its checksum.
    pub torn: u64,
    pub completed: u64,
}

fn actor_name(a: Actor) -> &'static str {
    match a {
        Actor::Client => "client",
        Actor::Server => "server",
        Actor::Monitor => "monitor",
    }
}

fn flag(region: &Region) -> SlotState {
    SlotState::try_from(region.read_local(0, 1).unwrap()[0]).expect("valid state byte")
}

/// Runs `n` random interleavings of client, server and monitor actions on one
/// slot, checking every observed flag change against the transition table
/// and the checksum of every image observed in state 1 or 2.
pub fn random_schedules(n: usize, steps: usize, seed: u64) -> ScheduleReport {
    const D: usize = 2;
    let mut report = ScheduleReport::default();
    for sched in 0..n {
        let memory = Arc::new(ServerMemory::new(ServerId(0)));
        let region = memory.register(slot_len(D, 3));
        let node = ServerNode::new(
            memory.clone(),
            Arc::new(OneSlot {
                region: region.descriptor(),
            }),
        );
        let fabric = InProcFabric::new();
        fabric.add_node(node);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let mut slot = ClientSlot::new(conn.remote_regions()[0]);
        let mut released = false;
        let mut next_seq = 1u64;
        let mut server_last_seq = 0u64;
        let mut rng = Stream::new(seed, 0x5343, sched as u64);
        let mut prev = flag(&region);
        for _ in 0..steps {
            let actor = match rng.below(10) {
                0..=3 => Actor::Client,
                4..=8 => Actor::Server,
                _ => Actor::Monitor,
            };
            match actor {
                Actor::Client if released => {
                    // Reconnecting: the server's handshake handler hands the
                    // slot back once it has reallocated it.
                    if flag(&region) == SlotState::Empty {
                        slot = ClientSlot::new(slot.region);
                        released = false;
                    }
                }
                Actor::Client => match slot.shadow {
                    SlotState::Empty => {
                        let rows: Vec<RequestRow> = (0..rng.below(4))
                            .map(|i| RequestRow {
                                hidden: vec![rng.uniform_f32(-1.0, 1.0); D],
                                expert_id: 0,
                                router_score: rng.unit_f32(),
                                token_tag: i as u32,
                            })
                            .collect();
                        let header = SlotHeader::request(0, rows.len(), D, next_seq);
                        next_seq += 1;
                        client_submit(conn.as_mut(), &mut slot, &header, &rows)
                            .unwrap()
                            .wait()
                            .unwrap();
                    }
                    _ => match client_poll(conn.as_mut(), &mut slot) {
                        Ok(PollOutcome::Ready { .. }) => report.completed += 1,
                        Ok(PollOutcome::Pending) => {}
                        Ok(PollOutcome::Released) => released = true,
                        Err(_) => report.torn += 1,
                    },
                },
                Actor::Server => match flag(&region) {
                    SlotState::ClientWriteDone => match server_read_request(&region) {
                        Ok(Some((h, rows))) if h.request_seq > server_last_seq => {
                            server_last_seq = h.request_seq;
                            let out: Vec<f32> = rows.iter().flat_map(|r| r.hidden.clone()).collect();
                            server_publish(&region, &h, &out).unwrap();
                        }
                        Ok(_) => {}
                        Err(_) => report.torn += 1,
                    },
                    SlotState::Offline => {
                        server_reallocate(&region).unwrap();
                        server_last_seq = 0;
                    }
                    _ => {}
                },
                Actor::Monitor => {
                    // Release also revokes the client's registration, so its
                    // next step is a reconnect.
                    server_mark_offline(&region).unwrap();
                    released = true;
                }
            }
            report.steps += 1;
            let image = region.read_local(0, region.len()).unwrap();
            let now = SlotState::try_from(image[0]).unwrap();
            if matches!(now, SlotState::ClientWriteDone | SlotState::ServerComputationDone)
                && verify_sealed(&image).is_err()
            {
                report.torn += 1;
            }
            if now != prev {
                *report
                    .transitions
                    .entry((prev as u8, now as u8, actor_name(actor)))
                    .or_default() += 1;
                if !valid_transition(prev, now, actor) {
                    report.invalid.push(format!(
                        "schedule {sched}: {prev:?} -> {now:?} by {actor:?}"
                    ));
                }
                prev = now;
            }
        }
        report.schedules += 1;
    }
    report
}

#[derive(Debug, Default)]
pub struct TornReport {
    pub round_trips: u64,
    pub observations: u64,
    pub torn: u64,
    pub client_errors: u64,
    pub server_bad_crc: u64,
}

/// A client drives `round_trips` requests to a real server over TCP while an
/// observer snapshots the slot regions in server memory. Every snapshot with
/// state 1 or 2 must carry a valid checksum.
pub fn tcp_torn_reads(round_trips: u64, rows: usize, d: usize) -> TornReport {
    use eaas::model::{init_weights, ModelSpec};
    use eaas::server::{ExpertServer, ServerConfig};
    use eaas::transport::tcp::TcpFabric;

    let spec = ModelSpec {
        num_layers: 1,
        num_experts: 2,
        top_k: 1,
        hidden_dim: d,
        inner_dim: d,
        seed: 3,
    };
    let weights = Arc::new(init_weights(&spec).unwrap());
    let mut cfg = ServerConfig::new(ServerId(0), vec![0, 1]);
    cfg.listen_addr = Some("127.0.0.1:0".into());
    cfg.max_rows_per_slot = rows;
    cfg.idle_sleep = Duration::from_micros(20);
    let server = ExpertServer::start(cfg, weights, None).unwrap();
    let fabric = TcpFabric::new();
    fabric.register(ServerId(0), server.tcp_addr().unwrap());

    let stop = Arc::new(AtomicBool::new(false));
    let observations = Arc::new(AtomicU64::new(0));
    let torn = Arc::new(AtomicU64::new(0));
    let observer = {
        let (node, stop, observations, torn) =
            (server.node(), stop.clone(), observations.clone(), torn.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::Acquire) {
                for id in node.memory.region_ids() {
                    let Some(r) = node.memory.get(id) else { continue };
                    let image = r.read_local(0, r.len()).unwrap();
                    if matches!(image[0], 1 | 2) {
                        observations.fetch_add(1, Ordering::Relaxed);
                        if verify_sealed(&image).is_err() {
                            torn.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                std::thread::yield_now();
            }
        })
    };

    let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
    let mut slots: Vec<ClientSlot> = conn.remote_regions().iter().map(|r| ClientSlot::new(*r)).collect();
    let mut rng = Stream::new(9, 0x544F, 0);
    let mut report = TornReport::default();
    for i in 0..round_trips {
        let slot = &mut slots[(i % 2) as usize];
        let data: Vec<RequestRow> = (0..rows)
            .map(|t| RequestRow {
                hidden: (0..d).map(|_| rng.uniform_f32(-1.0, 1.0)).collect(),
                expert_id: (t % 2) as u32,
                router_score: rng.unit_f32(),
                token_tag: t as u32,
            })
            .collect();
        let header = SlotHeader::request(0, rows, d, i + 1);
        if client_submit(conn.as_mut(), slot, &header, &data)
            .and_then(|c| c.wait())
            .is_err()
        {
            report.client_errors += 1;
            continue;
        }
        loop {
            match client_poll(conn.as_mut(), slot) {
                Ok(PollOutcome::Ready { .. }) => break,
                Ok(PollOutcome::Pending) => std::thread::yield_now(),
                _ => {
                    report.client_errors += 1;
                    break;
                }
            }
        }
        report.round_trips += 1;
    }
    stop.store(true, Ordering::Release);
    observer.join().unwrap();
    report.observations = observations.load(Ordering::Relaxed);
    report.torn = torn.load(Ordering::Relaxed);
    report.server_bad_crc = server.metrics().bad_crc_slots;
    report
}
