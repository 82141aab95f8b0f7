//! Slot round trips against a single server with no simulated service time.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::model::{init_weights, ModelSpec};
use crate::protocol::{client_poll, client_submit, request_row_len, ClientSlot, PollOutcome, RequestRow, SlotHeader};
use crate::server::{ExpertServer, ServerConfig};
use crate::transport::inproc::InProcFabric;
use crate::transport::tcp::TcpFabric;
use crate::transport::Fabric;
use crate::{ClientId, Error, Result, ServerId};

use super::scenario::Backend;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportBench {
    pub backend: Backend,
    pub rows: usize,
    pub hidden_dim: usize,
    pub iterations: usize,
    pub mean_round_trip: Duration,
    pub rows_per_sec: f64,
    pub request_bytes: usize,
}

/// Times `iterations` submit/poll round trips of `rows` rows each.
pub fn bench_transport(backend: Backend, rows: usize, hidden_dim: usize, iterations: usize) -> Result<TransportBench> {
    if rows == 0 || iterations == 0 {
        return Err(Error::Config("rows and iterations must be positive".into()));
    }
    let spec = ModelSpec {
        num_layers: 1,
        num_experts: 1,
        top_k: 1,
        hidden_dim,
        inner_dim: hidden_dim,
        seed: 1,
    };
    let weights = Arc::new(init_weights(&spec)?);
    let mut cfg = ServerConfig::new(ServerId(0), vec![0]);
    cfg.max_rows_per_slot = rows;
    cfg.idle_sleep = Duration::from_micros(5);
    cfg.max_wait = Duration::ZERO;
    if backend == Backend::Tcp {
        cfg.listen_addr = Some("127.0.0.1:0".into());
    }
    let server = ExpertServer::start(cfg, weights, None)?;
    let fabric: Arc<dyn Fabric> = match backend {
        Backend::Inproc => {
            let f = InProcFabric::new();
            f.add_node(server.node());
            f
        }
        Backend::Tcp => {
            let f = TcpFabric::new();
            f.register(ServerId(0), server.tcp_addr().expect("tcp address"));
            f
        }
    };
    let mut conn = fabric.establish(ClientId(0), ServerId(0))?;
    let mut slot = ClientSlot::new(conn.remote_regions()[0]);
    let payload: Vec<RequestRow> = (0..rows)
        .map(|i| RequestRow {
            hidden: vec![0.5; hidden_dim],
            expert_id: 0,
            router_score: 1.0,
            token_tag: i as u32,
        })
        .collect();
    let start = Instant::now();
    for i in 0..iterations {
        // Two slots alternate by seq parity; the first slot takes even seqs.
        let header = SlotHeader::request(0, rows, hidden_dim, 2 * (i as u64 + 1));
        client_submit(conn.as_mut(), &mut slot, &header, &payload)?.wait()?;
        loop {
            match client_poll(conn.as_mut(), &mut slot)? {
                PollOutcome::Ready { .. } => break,
                PollOutcome::Pending => std::thread::yield_now(),
                PollOutcome::Released => return Err(Error::protocol("slot released during bench")),
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(TransportBench {
        backend,
        rows,
        hidden_dim,
        iterations,
        mean_round_trip: elapsed / iterations as u32,
        rows_per_sec: (rows * iterations) as f64 / elapsed.as_secs_f64(),
        request_bytes: rows * request_row_len(hidden_dim),
    })
}
